use std::path::{Path, PathBuf};
use std::process::Command;

use embcodec::mae::data::{write_split, Dataset, Split};
use embcodec::mae::{decode_checkpoint, encode_checkpoint, MaeConfig, MaeModel};
use embcodec::numerics::{tnsr, Tensor};
use embcodec::quantizer::round_quantize;
use embcodec_cli::{run, RunManifest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn cli(args: &[&str]) {
    let mut full = vec!["embcodec"];
    full.extend_from_slice(args);
    run(full).unwrap_or_else(|e| panic!("{:?} failed: {}", args, e.render()));
}

fn data(dir: &TempDir) -> PathBuf {
    let out = dir.path().join("data");
    cli(&[
        "gen-data",
        "--out",
        &p(&out),
        "--train",
        "40",
        "--eval",
        "20",
        "--seed",
        "4",
    ]);
    out
}

fn pretrained(dir: &TempDir) -> (PathBuf, PathBuf) {
    let d = data(dir);
    let out = dir.path().join("pre");
    cli(&[
        "train",
        "--data",
        &p(&d),
        "--out",
        &p(&out),
        "--steps",
        "30",
        "--seed",
        "2",
    ]);
    (d, out)
}

#[test]
fn zero_steps_writes_the_initialisation() {
    let dir = TempDir::new().unwrap();
    let d = data(&dir);
    let out = dir.path().join("t");
    cli(&[
        "train",
        "--data",
        &p(&d),
        "--out",
        &p(&out),
        "--steps",
        "0",
        "--seed",
        "9",
    ]);
    let init = MaeModel::new(MaeConfig::default(), 9).unwrap();
    assert_eq!(
        std::fs::read(out.join("model.ckpt")).unwrap(),
        encode_checkpoint(&init).unwrap()
    );
}

#[test]
fn partial_freeze_reports_its_fraction_and_reruns_match() {
    let dir = TempDir::new().unwrap();
    let (d, pre) = pretrained(&dir);
    let go = |name: &str| {
        let out = dir.path().join(name);
        cli(&[
            "train",
            "--data",
            &p(&d),
            "--init",
            &p(&pre.join("model.ckpt")),
            "--lambda",
            "5000",
            "--steps",
            "8",
            "--freeze",
            "partial",
            "--out",
            &p(&out),
        ]);
        out
    };
    let (a, b) = (go("a"), go("b"));
    let m = RunManifest::read(&a.join("manifest.json")).unwrap();
    let f = m.results["trainable_fraction"].as_f64().unwrap();
    assert!((0.05..=0.25).contains(&f), "{f}");
    assert_eq!(m.config["freeze"], "partial");
    for file in ["model.ckpt", "density.bin", "trace.csv"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    // the frozen encoder blocks are untouched
    let before = decode_checkpoint(&std::fs::read(pre.join("model.ckpt")).unwrap()).unwrap();
    let after = decode_checkpoint(&std::fs::read(a.join("model.ckpt")).unwrap()).unwrap();
    let r = before.group_range(embcodec::mae::Group::EncoderBlocks);
    assert_eq!(before.params()[r.clone()], after.params()[r]);
}

#[test]
fn compress_modes_round_trip() {
    let dir = TempDir::new().unwrap();
    let (d, pre) = pretrained(&dir);
    let image = d.join("eval/00003.tnsr");
    let (model, density) = (p(&pre.join("model.ckpt")), p(&pre.join("density.bin")));
    let file = |n: &str| p(&dir.path().join(n));

    cli(&[
        "compress",
        "--mode",
        "nec",
        "--input",
        &p(&image),
        "--model",
        &model,
        "--density",
        &density,
        "--out",
        &file("ref.neca"),
    ]);
    cli(&[
        "compress",
        "--mode",
        "nec",
        "--input",
        &p(&image),
        "--model",
        &model,
        "--density",
        &density,
        "--embed-tables",
        "--out",
        &file("emb.neca"),
    ]);
    cli(&[
        "decompress",
        "--input",
        &file("ref.neca"),
        "--density",
        &density,
        "--out",
        &file("ref.tnsr"),
    ]);
    // self-contained: no density available
    std::fs::remove_file(pre.join("density.bin")).unwrap();
    cli(&["decompress", "--input", &file("emb.neca"), "--out", &file("emb.tnsr")]);

    let m = decode_checkpoint(&std::fs::read(pre.join("model.ckpt")).unwrap()).unwrap();
    let y = m.embed_with_ratio(&tnsr::read(&image).unwrap(), 0.0, 0).unwrap();
    let want = round_quantize(&y).unwrap().to_tensor();
    assert_eq!(tnsr::read(file("ref.tnsr")).unwrap(), want);
    assert_eq!(tnsr::read(file("emb.tnsr")).unwrap(), want);

    for b in ["2", "8"] {
        cli(&[
            "compress",
            "--mode",
            "uqe",
            "--bits",
            b,
            "--input",
            &p(&image),
            "--model",
            &model,
            "--out",
            &file(&format!("u{b}")),
        ]);
    }
    let size = |n: &str| std::fs::metadata(dir.path().join(n)).unwrap().len();
    assert!(size("u2") < size("u8"));

    cli(&[
        "compress",
        "--mode",
        "rdc",
        "--bits",
        "16",
        "--input",
        &p(&image),
        "--out",
        &file("r16"),
    ]);
    cli(&["decompress", "--input", &file("r16"), "--out", &file("r16.tnsr")]);
    let back = tnsr::read(file("r16.tnsr")).unwrap();
    assert!(back.max_abs_diff(&tnsr::read(&image).unwrap()) <= 0.5 / 65535.0 + 1e-9);
    assert!(dir.path().join("r16.manifest.json").is_file());
}

#[test]
fn mode_flag_mismatch_names_the_flag() {
    let dir = TempDir::new().unwrap();
    let err = run([
        "embcodec", "compress", "--mode", "nec", "--input", "x", "--out", "y", "--bits", "2",
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.render().contains("--model, --density"), "{}", err.render());
    let out = p(&dir.path().join("o"));
    let err = run([
        "embcodec",
        "compress",
        "--mode",
        "rdc",
        "--input",
        "x",
        "--out",
        &out,
        "--bits",
        "8",
        "--embed-tables",
    ])
    .unwrap_err();
    assert!(err.render().contains("--embed-tables"), "{}", err.render());
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = TempDir::new().unwrap();
    let d = data(&dir);
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# shared\nsteps = 3\nlr = 0.01\nseed = 5\n").unwrap();
    let out = dir.path().join("t");
    cli(&[
        "--config",
        &p(&cfg),
        "train",
        "--data",
        &p(&d),
        "--out",
        &p(&out),
        "--lr",
        "0.02",
    ]);
    let m = RunManifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(m.config["steps"], "3");
    assert_eq!(m.config["lr"], "0.02");
    assert_eq!(m.config["batch-size"], "16");
    assert_eq!(m.seeds, [5]);
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
}

#[test]
fn sweep_rows_match_grid() {
    let dir = TempDir::new().unwrap();
    let d = data(&dir);
    let out = dir.path().join("sw");
    cli(&[
        "sweep",
        "--data",
        &p(&d),
        "--out",
        &p(&out),
        "--lambdas",
        "100,10000",
        "--uqe-bits",
        "2,f32",
        "--rdc-bits",
        "8",
        "--seeds",
        "0,1",
        "--pretrain-steps",
        "10",
        "--adapt-steps",
        "4",
        "--probe-epochs",
        "2",
        "--rdc-epochs",
        "1",
    ]);
    let csv = std::fs::read_to_string(out.join("rd.csv")).unwrap();
    // per seed: two λ × (NEC, NEC+prefix), two UQE widths, one RDC depth
    assert_eq!(csv.lines().count(), 1 + 2 * (4 + 2 + 1));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",ok")));
    assert!(std::fs::read_to_string(out.join("rd.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn probe_separates_clustered_embeddings() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut set = |count: usize| {
        let mut d = Dataset::default();
        for i in 0..count {
            let label = i % 3;
            let data = (0..8 * 5)
                .map(|j| if j / 5 == label { 4.0 } else { 0.0 } + rng.random_range(-0.3..0.3))
                .collect();
            d.images.push(Tensor::new(vec![8, 5], data).unwrap());
            d.labels.push(label);
        }
        d
    };
    let split = Split {
        train: set(60),
        eval: set(30),
    };
    let d = dir.path().join("emb");
    std::fs::create_dir_all(&d).unwrap();
    write_split(&d, &split).unwrap();
    let r = embcodec_cli::cmd_probe(
        &embcodec_cli::ProbeArgs {
            data: Some(p(&d)),
            ..Default::default()
        },
        &Default::default(),
    )
    .unwrap();
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn binary_reports_one_line_errors_and_reads_seed_env() {
    let exe = env!("CARGO_BIN_EXE_embcodec");
    let out = Command::new(exe)
        .args(["train", "--out", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[usage]: missing required flag --data"), "{err}");

    let dir = TempDir::new().unwrap();
    let d = dir.path().join("d");
    let status = Command::new(exe)
        .args(["gen-data", "--out", &p(&d), "--train", "3", "--eval", "3"])
        .env("EMBCODEC_SEED", "77")
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(status.stdout.is_empty());
    let m = RunManifest::read(&d.join("manifest.json")).unwrap();
    assert_eq!(m.seeds, [77]);
}
