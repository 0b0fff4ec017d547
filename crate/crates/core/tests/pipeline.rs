use embcodec::bench::{
    adapt, nec_transport, pretrain, rdc_archive, rdc_decode, uqe_archive, uqe_decode, BenchConfig, UqeBits,
};
use embcodec::codec::{AdaptiveOrder0, Archive};
use embcodec::entropy::{decode_density, encode_density};
use embcodec::mae::data::{synthetic, SyntheticOptions};
use embcodec::mae::{decode_checkpoint, encode_checkpoint};

fn small() -> (embcodec::mae::data::Split, BenchConfig) {
    let split = synthetic(&SyntheticOptions {
        train: 24,
        eval: 8,
        seed: 11,
        ..SyntheticOptions::default()
    })
    .unwrap();
    let cfg = BenchConfig {
        pretrain_steps: 15,
        adapt_steps: 10,
        batch_size: 8,
        ..BenchConfig::default()
    };
    (split, cfg)
}

#[test]
fn adapted_model_survives_serialisation_and_transport() {
    let (split, cfg) = small();
    let (pre, trace) = pretrain(&split.train.images, &cfg, 0).unwrap();
    assert_eq!(trace.len(), 15);
    let (model, density, _) = adapt(&pre, &split.train.images, 3000.0, &cfg, 0).unwrap();

    // both artifacts reload bit-identically
    let model = decode_checkpoint(&encode_checkpoint(&model).unwrap()).unwrap();
    let density = decode_density(&encode_density(&density)).unwrap();
    assert!(density.ranges().is_some());

    let t = nec_transport(&model, &density, &split, &cfg, 0).unwrap();
    assert_eq!(t.eval.len(), 8);
    assert_eq!(t.eval[0].shape(), [32, 17]);
    for (&payload, &archive) in t.payload_bytes.iter().zip(&t.archive_bytes) {
        assert!(archive > payload);
    }
    // the coder lands close to the density's own estimate
    let coded: f64 = t.payload_bytes.iter().map(|&b| 8.0 * b as f64).sum();
    let ideal: f64 = t.analytic_bits.iter().sum();
    assert!(coded <= ideal * 1.1 + 8.0 * 8.0 * 8.0, "{coded} vs {ideal}");
}

#[test]
fn baseline_archives_round_trip() {
    let (split, _) = small();
    let coder = AdaptiveOrder0::default();
    let x = &split.eval.images[0];

    let a = rdc_archive(x, 16, &coder).unwrap();
    let back = rdc_decode(&Archive::unpack(&a.pack().unwrap()).unwrap(), &coder).unwrap();
    assert!(back.max_abs_diff(x) <= 0.5 / 65535.0 + 1e-12);

    let y = x.clone().reshape(vec![16, 16]).unwrap();
    let a = uqe_archive(&y, UqeBits::F32, &coder).unwrap();
    let back = uqe_decode(&Archive::unpack(&a.pack().unwrap()).unwrap(), &coder).unwrap();
    assert!(back.max_abs_diff(&y) < 1e-6);
}
