//! The three transport pipelines, each ending in a measured [`RdPoint`].
//!
//! Sizes always come from serialised archives. NEC counts payload bytes per
//! sample and reports the density blob (and the decoder prefix, when used)
//! as a one-time cost; `fully_loaded` switches every method to whole-archive
//! accounting instead.

use half::f16;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::probe::{train_probe, ProbeConfig, ProbeResult};
use crate::codec::{
    model_id, range_decode, range_encode, AdaptiveOrder0, Archive, ByteCompressor, ModeHeader, TableSource, UqeStorage,
};
use crate::entropy::{build_pmf_tables, encode_density, FactorizedDensity, PmfTable};
use crate::error::{Error, Result};
use crate::mae::data::Split;
use crate::mae::{train, FreezeMask, MaeConfig, MaeModel, Objective, TrainOptions, TrainStep};
use crate::numerics::Tensor;
use crate::optim::Adam;
use crate::quantizer::{affine_dequantize, affine_quantize, round_quantize};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub mae: MaeConfig,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
    pub density_lr: f64,
    pub batch_size: usize,
    pub freeze: FreezeMask,
    pub density_filters: Vec<usize>,
    pub precision_bits: u8,
    pub probe: ProbeConfig,
    pub rdc_epochs: usize,
    pub rdc_lr: f64,
    /// Mask ratio of transported embeddings; adaptation runs at the same
    /// ratio so the trained rate is the transmitted one.
    pub eval_mask_ratio: f64,
    /// Count whole archives (headers included) instead of payloads.
    pub fully_loaded: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mae: MaeConfig::default(),
            pretrain_steps: 1500,
            pretrain_lr: 2e-3,
            adapt_steps: 600,
            adapt_lr: 2e-3,
            density_lr: 1e-2,
            batch_size: 16,
            freeze: FreezeMask::partial(),
            density_filters: vec![3, 3, 3],
            precision_bits: 16,
            probe: ProbeConfig::default(),
            rdc_epochs: 15,
            rdc_lr: 1e-3,
            eval_mask_ratio: 0.0,
            fully_loaded: false,
        }
    }
}

/// One measured point of a rate–accuracy curve.
#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    /// `NEC`, `NEC+prefix`, `UQE-<b>`, `UQE-f16`, `UQE-f32`, `RDC-<d>`.
    pub method: String,
    /// λ for NEC, bit width otherwise.
    pub setting: f64,
    pub seed: u64,
    pub bits_per_sample: f64,
    pub bytes_per_sample: f64,
    pub distortion_mse: f64,
    pub probe_accuracy: f64,
    pub analytic_rate_bits: Option<f64>,
    pub one_time_cost_bytes: u64,
}

impl RdPoint {
    fn sized(method: String, setting: f64, seed: u64, bytes_per_sample: f64) -> Self {
        Self {
            method,
            setting,
            seed,
            bits_per_sample: 8.0 * bytes_per_sample,
            bytes_per_sample,
            distortion_mse: 0.0,
            probe_accuracy: 0.0,
            analytic_rate_bits: None,
            one_time_cost_bytes: 0,
        }
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, c) = v.into_iter().fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        0.0
    } else {
        s / c as f64
    }
}

/// Embeddings of every image at `ratio` (mask draws seeded per index).
pub fn embed_all(model: &MaeModel, images: &[Tensor], ratio: f64, seed: u64) -> Result<Vec<Tensor>> {
    images
        .iter()
        .enumerate()
        .map(|(i, x)| model.embed_with_ratio(x, ratio, seed.wrapping_add(i as u64)))
        .collect()
}

/// Masked-autoencoder pre-training from a fresh initialisation.
pub fn pretrain(images: &[Tensor], cfg: &BenchConfig, seed: u64) -> Result<(MaeModel, Vec<TrainStep>)> {
    let mut model = MaeModel::new(cfg.mae.clone(), seed)?;
    let opts = TrainOptions {
        steps: cfg.pretrain_steps,
        lr: cfg.pretrain_lr,
        batch_size: cfg.batch_size,
        objective: Objective::Reconstruction,
        freeze: FreezeMask::none(),
        seed,
        ..TrainOptions::default()
    };
    let trace = train(&mut model, None, images, &opts)?;
    Ok((model, trace))
}

pub fn new_density(cfg: &BenchConfig, seed: u64) -> Result<FactorizedDensity> {
    FactorizedDensity::new(cfg.mae.embed_dim, &cfg.density_filters, 10.0, seed)
}

/// `model` with its mask ratio replaced.
fn at_ratio(model: &MaeModel, ratio: f64) -> Result<MaeModel> {
    let config = MaeConfig {
        mask_ratio: ratio,
        ..model.config().clone()
    };
    MaeModel::from_params(config, model.params().to_vec())
}

/// `R₀ / D₀` for the pretrained model at the transport mask ratio and a
/// fresh density: the λ at which both terms start out equal.
pub fn lambda_scale(model: &MaeModel, images: &[Tensor], cfg: &BenchConfig, seed: u64) -> Result<f64> {
    let model = at_ratio(model, cfg.eval_mask_ratio)?;
    let density = new_density(cfg, seed)?;
    let sample = &images[..images.len().min(64)];
    let mut r = 0.0;
    let mut d = 0.0;
    for (i, x) in sample.iter().enumerate() {
        let p = model.compression_loss(x, &density, 1.0, seed.wrapping_add(i as u64))?;
        r += p.rate;
        d += p.distortion;
    }
    if !(d > 0.0) {
        return Err(Error::DegenerateInput("pretrained model reconstructs perfectly".into()));
    }
    Ok(r / d)
}

/// Compression-aware adaptation of a pretrained model at `lambda`. The
/// returned model uses the transport mask ratio; the returned density
/// carries symbol ranges recorded on the training split.
pub fn adapt(
    pretrained: &MaeModel,
    images: &[Tensor],
    lambda: f64,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<(MaeModel, FactorizedDensity, Vec<TrainStep>)> {
    let mut model = at_ratio(pretrained, cfg.eval_mask_ratio)?;
    let mut density = new_density(cfg, seed)?;
    let opts = TrainOptions {
        steps: cfg.adapt_steps,
        lr: cfg.adapt_lr,
        density_lr: cfg.density_lr,
        batch_size: cfg.batch_size,
        objective: Objective::RateDistortion { lambda },
        freeze: cfg.freeze,
        seed,
    };
    let trace = train(&mut model, Some(&mut density), images, &opts)?;
    let grids = embed_all(&model, images, cfg.eval_mask_ratio, seed)?;
    let rounded: Vec<Tensor> = grids.iter().map(|y| y.map(f64::round)).collect();
    density.record_ranges(&rounded)?;
    Ok((model, density, trace))
}

/// Mean `(D, R)` of the training objective over `images` with fixed seeds.
pub fn evaluate_objective(
    model: &MaeModel,
    density: &FactorizedDensity,
    images: &[Tensor],
    seed: u64,
) -> Result<(f64, f64)> {
    let mut d = 0.0;
    let mut r = 0.0;
    for (i, x) in images.iter().enumerate() {
        let p = model.compression_loss(x, density, 0.0, seed.wrapping_add(i as u64))?;
        d += p.distortion;
        r += p.rate;
    }
    let n = images.len().max(1) as f64;
    Ok((d / n, r / n))
}

/// Reconstruction MSE over all patches when the decoder receives `grid`
/// for the unmasked image.
fn reconstruction_mse(model: &MaeModel, x: &Tensor, grid: &Tensor) -> Result<f64> {
    let patches = model.patchify(x)?;
    let n = grid.dims2()?.1;
    let kept: Vec<usize> = (0..n - 1).collect();
    let yt = grid.transpose()?.into_data();
    let (pred, _) = model.decode(model.params(), &yt, &kept);
    let pd = model.config().patch_dim();
    let err: f64 = pred[pd..].iter().zip(&patches).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(err / patches.len() as f64)
}

fn check_full_grid(model: &MaeModel, ratio: f64) -> Result<()> {
    if crate::mae::kept_count(model.config(), ratio) != model.config().num_patches() {
        return Err(Error::Config("transport embeddings must use mask ratio 0".into()));
    }
    Ok(())
}

/// Everything the consumer receives under NEC, decoded.
pub struct NecTransport {
    pub train: Vec<Tensor>,
    pub eval: Vec<Tensor>,
    pub tables: PmfTable,
    pub payload_bytes: Vec<usize>,
    pub archive_bytes: Vec<usize>,
    /// Eval-split `rate_bits` of the rounded grids.
    pub analytic_bits: Vec<f64>,
    pub distortion_mse: f64,
    pub density_blob_bytes: usize,
}

/// Provider side and consumer side of NEC for every image of `split`:
/// embed, round, range-code, pack, then unpack, decode, and check the
/// symbols survived.
pub fn nec_transport(
    model: &MaeModel,
    density: &FactorizedDensity,
    split: &Split,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<NecTransport> {
    check_full_grid(model, cfg.eval_mask_ratio)?;
    let ranges = density
        .ranges()
        .ok_or_else(|| Error::Config("density has no recorded symbol ranges".into()))?
        .to_vec();
    let tables = build_pmf_tables(density, &ranges, cfg.precision_bits)?;
    let id = model_id(density);
    let e = model.config().embed_dim;

    let transport = |images: &[Tensor], eval: bool, out: &mut NecTransport| -> Result<Vec<Tensor>> {
        let mut decoded = Vec::with_capacity(images.len());
        for (i, x) in images.iter().enumerate() {
            let y = model.embed_with_ratio(x, cfg.eval_mask_ratio, seed.wrapping_add(i as u64))?;
            let q = round_quantize(&y)?;
            let archive = Archive {
                channels: e as u16,
                tokens: q.tokens() as u32,
                precision_bits: cfg.precision_bits,
                header: ModeHeader::Nec {
                    ranges: ranges.clone(),
                    tables: TableSource::Referenced(id),
                },
                payload: range_encode(&q, &tables)?,
            };
            let bytes = archive.pack()?;
            let back = Archive::unpack(&bytes)?;
            let symbols = range_decode(&back.payload, &tables, back.channels as usize, back.tokens as usize)?;
            if symbols != q {
                return Err(Error::Corruption(format!("sample {i}: decoded symbols differ")));
            }
            let yhat = symbols.to_tensor();
            if eval {
                out.payload_bytes.push(archive.payload.len());
                out.archive_bytes.push(bytes.len());
                out.analytic_bits.push(density.rate_bits(&yhat)?);
                out.distortion_mse += reconstruction_mse(model, x, &yhat)? / images.len() as f64;
            }
            decoded.push(yhat);
        }
        Ok(decoded)
    };
    let mut out = NecTransport {
        train: vec![],
        eval: vec![],
        tables: tables.clone(),
        payload_bytes: vec![],
        archive_bytes: vec![],
        analytic_bits: vec![],
        distortion_mse: 0.0,
        density_blob_bytes: encode_density(density).len(),
    };
    out.train = transport(&split.train.images, false, &mut out)?;
    out.eval = transport(&split.eval.images, true, &mut out)?;
    Ok(out)
}

/// Probe on NEC-transported embeddings, optionally through the decoder prefix.
pub fn run_nec(
    model: &MaeModel,
    transport: &NecTransport,
    split: &Split,
    lambda: f64,
    cfg: &BenchConfig,
    prefix: bool,
    seed: u64,
) -> Result<RdPoint> {
    let sizes = if cfg.fully_loaded {
        &transport.archive_bytes
    } else {
        &transport.payload_bytes
    };
    let method = if prefix { "NEC+prefix" } else { "NEC" };
    let mut p = RdPoint::sized(method.into(), lambda, seed, mean(sizes.iter().map(|&b| b as f64)));
    p.distortion_mse = transport.distortion_mse;
    p.analytic_rate_bits = Some(mean(transport.analytic_bits.iter().copied()));
    let prefix_bytes = if prefix { 8 * model.prefix_range().len() } else { 0 };
    p.one_time_cost_bytes = (transport.density_blob_bytes + prefix_bytes) as u64;
    let probe = ProbeConfig {
        prefix,
        seed,
        ..cfg.probe.clone()
    };
    p.probe_accuracy = train_probe(
        &transport.train,
        &split.train.labels,
        &transport.eval,
        &split.eval.labels,
        &probe,
        Some(model),
    )?
    .accuracy;
    Ok(p)
}

/// Storage of the quantised-embedding baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UqeBits {
    Int(u8),
    F16,
    F32,
}

impl UqeBits {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "16" | "f16" => Ok(UqeBits::F16),
            "32" | "f32" => Ok(UqeBits::F32),
            other => match other.parse::<u8>() {
                Ok(b @ 2..=8) => Ok(UqeBits::Int(b)),
                _ => Err(Error::Config(format!("UQE bits `{other}` not in 2..=8, 16, 32"))),
            },
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            UqeBits::Int(b) => b,
            UqeBits::F16 => 16,
            UqeBits::F32 => 32,
        }
    }

    pub fn label(self) -> String {
        match self {
            UqeBits::Int(b) => format!("UQE-{b}"),
            UqeBits::F16 => "UQE-f16".into(),
            UqeBits::F32 => "UQE-f32".into(),
        }
    }
}

/// Packs one embedding as a UQE archive.
pub fn uqe_archive(y: &Tensor, bits: UqeBits, coder: &dyn ByteCompressor) -> Result<Archive> {
    let (e, n) = y.dims2()?;
    let (storage, raw) = match bits {
        UqeBits::F32 => (
            UqeStorage::Float32,
            y.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        ),
        UqeBits::F16 => (
            UqeStorage::Float16,
            y.data().iter().flat_map(|&v| f16::from_f64(v).to_le_bytes()).collect(),
        ),
        UqeBits::Int(b) => match affine_quantize(y, b) {
            Ok((codes, params)) => (UqeStorage::PerTensor(params), codes.iter().map(|&c| c as u8).collect()),
            Err(Error::DegenerateInput(_)) => (
                UqeStorage::Constant {
                    bits: b,
                    value: y.data()[0],
                },
                Vec::new(),
            ),
            Err(err) => return Err(err),
        },
    };
    let payload = if raw.is_empty() {
        Vec::new()
    } else {
        coder.compress(&raw)
    };
    Ok(Archive {
        channels: e as u16,
        tokens: n as u32,
        precision_bits: 0,
        header: ModeHeader::Uqe(storage),
        payload,
    })
}

/// Consumer side of [`uqe_archive`].
pub fn uqe_decode(archive: &Archive, coder: &dyn ByteCompressor) -> Result<Tensor> {
    let shape = [archive.channels as usize, archive.tokens as usize];
    let count = shape[0] * shape[1];
    let ModeHeader::Uqe(storage) = &archive.header else {
        return Err(Error::format("mode", "not a UQE archive"));
    };
    if let UqeStorage::Constant { value, .. } = storage {
        return Ok(Tensor::filled(&shape, *value));
    }
    let raw = coder.decompress(&archive.payload)?;
    let width = match storage {
        UqeStorage::Float32 => 4,
        UqeStorage::Float16 => 2,
        _ => 1,
    };
    if raw.len() != count * width {
        return Err(Error::Corruption(format!(
            "{} code bytes for {count} values",
            raw.len()
        )));
    }
    match storage {
        UqeStorage::Float32 => Tensor::new(
            shape.to_vec(),
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        ),
        UqeStorage::Float16 => Tensor::new(
            shape.to_vec(),
            raw.chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f64())
                .collect(),
        ),
        UqeStorage::PerTensor(params) => {
            let codes: Vec<u32> = raw.iter().map(|&b| b as u32).collect();
            affine_dequantize(&codes, params, &shape)
        }
        _ => Err(Error::format(
            "granularity",
            "per-channel payloads are not produced here",
        )),
    }
}

/// Quantised-embedding baseline on a pretrained model.
pub fn run_uqe(model: &MaeModel, split: &Split, bits: UqeBits, cfg: &BenchConfig, seed: u64) -> Result<RdPoint> {
    check_full_grid(model, cfg.eval_mask_ratio)?;
    let coder = AdaptiveOrder0::default();
    let mut sizes = Vec::new();
    let mut distortion = 0.0;
    let mut decode_set = |images: &[Tensor], eval: bool| -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for (i, x) in images.iter().enumerate() {
            let y = model.embed_with_ratio(x, cfg.eval_mask_ratio, seed.wrapping_add(i as u64))?;
            let archive = uqe_archive(&y, bits, &coder)?;
            let bytes = archive.pack()?;
            let yhat = uqe_decode(&Archive::unpack(&bytes)?, &coder)?;
            if eval {
                sizes.push(if cfg.fully_loaded {
                    bytes.len()
                } else {
                    archive.payload.len()
                } as f64);
                distortion += reconstruction_mse(model, x, &yhat)? / images.len() as f64;
            }
            out.push(yhat);
        }
        Ok(out)
    };
    let train_set = decode_set(&split.train.images, false)?;
    let eval_set = decode_set(&split.eval.images, true)?;
    let mut p = RdPoint::sized(bits.label(), bits.bits() as f64, seed, mean(sizes));
    p.distortion_mse = distortion;
    let probe = ProbeConfig {
        prefix: false,
        seed,
        ..cfg.probe.clone()
    };
    p.probe_accuracy = train_probe(
        &train_set,
        &split.train.labels,
        &eval_set,
        &split.eval.labels,
        &probe,
        None,
    )?
    .accuracy;
    Ok(p)
}

/// Raw pixels in `[0, 1]` at `depth` bits, little-endian for 16-bit.
pub fn raw_bytes(x: &Tensor, depth: u8) -> Result<Vec<u8>> {
    match depth {
        8 => Ok(x
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()),
        16 => Ok(x
            .data()
            .iter()
            .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_le_bytes())
            .collect()),
        other => Err(Error::Config(format!("raw bit depth {other} is not 8 or 16"))),
    }
}

fn from_raw(bytes: &[u8], depth: u8, shape: &[usize]) -> Result<Tensor> {
    let data = match depth {
        8 => bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        _ => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
    };
    Tensor::new(shape.to_vec(), data)
}

/// Packs one image as an RDC archive.
pub fn rdc_archive(x: &Tensor, depth: u8, coder: &dyn ByteCompressor) -> Result<Archive> {
    let shape = x
        .shape()
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::Range(format!("dimension {d} exceeds u32"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Archive {
        channels: 0,
        tokens: 0,
        precision_bits: 0,
        header: ModeHeader::Rdc {
            bit_depth: depth,
            shape,
        },
        payload: coder.compress(&raw_bytes(x, depth)?),
    })
}

pub fn rdc_decode(archive: &Archive, coder: &dyn ByteCompressor) -> Result<Tensor> {
    let ModeHeader::Rdc { bit_depth, shape } = &archive.header else {
        return Err(Error::format("mode", "not an RDC archive"));
    };
    let shape: Vec<usize> = shape.iter().map(|&d| d as usize).collect();
    let raw = coder.decompress(&archive.payload)?;
    let want = shape.iter().product::<usize>() * (*bit_depth as usize / 8);
    if raw.len() != want {
        return Err(Error::Corruption(format!(
            "{} raw bytes, shape needs {want}",
            raw.len()
        )));
    }
    from_raw(&raw, *bit_depth, &shape)
}

/// Full fine-tuning of encoder plus mean-pool linear head on raw images.
pub fn finetune(
    model: &MaeModel,
    train_images: &[Tensor],
    train_labels: &[usize],
    eval_images: &[Tensor],
    eval_labels: &[usize],
    cfg: &BenchConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let k = train_labels.iter().chain(eval_labels).max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::DegenerateTask("fine-tuning needs at least two classes".into()));
    }
    let e = model.config().embed_dim;
    let all: Vec<usize> = (0..model.config().num_patches()).collect();
    let mut params = model.params().to_vec();
    // head: W (e×k) then b (k), on mean-pooled patch tokens
    let mut head = vec![0.0; e * k + k];
    let mut opt = Adam::new(params.len(), cfg.rdc_lr);
    let mut hopt = Adam::new(head.len(), cfg.probe.lr).with_weight_decay(cfg.probe.weight_decay);
    let train_patches = train_images
        .iter()
        .map(|x| model.patchify(x))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_images.len()).collect();

    let logits = |head: &[f64], f: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|c| head[e * k + c] + (0..e).map(|j| f[j] * head[j * k + c]).sum::<f64>())
            .collect()
    };
    let pooled = |yt: &[f64]| -> Vec<f64> {
        let t = yt.len() / e - 1;
        let mut f = vec![0.0; e];
        for row in yt[e..].chunks_exact(e) {
            f.iter_mut().zip(row).for_each(|(a, b)| *a += b / t as f64);
        }
        f
    };

    for _ in 0..cfg.rdc_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.probe.batch_size.max(1)) {
            let w = 1.0 / batch.len() as f64;
            let mut g = vec![0.0; params.len()];
            let mut hg = vec![0.0; head.len()];
            for &i in batch {
                let (yt, cache) = model.encode(&params, &train_patches[i], &all);
                let f = pooled(&yt);
                let l = logits(&head, &f);
                let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                let dl: Vec<f64> = (0..k)
                    .map(|c| w * (ex[c] / z - if c == train_labels[i] { 1.0 } else { 0.0 }))
                    .collect();
                let mut df = vec![0.0; e];
                for j in 0..e {
                    for c in 0..k {
                        hg[j * k + c] += f[j] * dl[c];
                        df[j] += head[j * k + c] * dl[c];
                    }
                }
                for c in 0..k {
                    hg[e * k + c] += dl[c];
                }
                let t = yt.len() / e - 1;
                let mut dyt = vec![0.0; yt.len()];
                for row in dyt[e..].chunks_exact_mut(e) {
                    row.iter_mut().zip(&df).for_each(|(a, b)| *a = b / t as f64);
                }
                model.encode_backward(&params, &mut g, &cache, &dyt);
            }
            opt.step(&mut params, &g, None);
            hopt.step(&mut head, &hg, None);
        }
    }

    let accuracy = |images: &[Tensor], labels: &[usize]| -> Result<f64> {
        let mut hits = 0;
        for (x, &l) in images.iter().zip(labels) {
            let (yt, _) = model.encode(&params, &model.patchify(x)?, &all);
            let lg = logits(&head, &pooled(&yt));
            let best = (0..k).fold(0, |b, c| if lg[c] > lg[b] { c } else { b });
            hits += usize::from(best == l);
        }
        Ok(hits as f64 / images.len().max(1) as f64)
    };
    Ok(ProbeResult {
        accuracy: accuracy(eval_images, eval_labels)?,
        train_accuracy: accuracy(train_images, train_labels)?,
    })
}

/// Raw-data baseline: compress pixels at `depth` bits, fine-tune the whole
/// model on what the consumer decodes.
pub fn run_rdc(model: &MaeModel, split: &Split, depth: u8, cfg: &BenchConfig, seed: u64) -> Result<RdPoint> {
    let coder = AdaptiveOrder0::default();
    let mut sizes = Vec::new();
    let mut distortion = 0.0;
    let mut decode_set = |images: &[Tensor], eval: bool| -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for x in images {
            let archive = rdc_archive(x, depth, &coder)?;
            let bytes = archive.pack()?;
            let xhat = rdc_decode(&Archive::unpack(&bytes)?, &coder)?;
            if eval {
                sizes.push(if cfg.fully_loaded {
                    bytes.len()
                } else {
                    archive.payload.len()
                } as f64);
                distortion += x
                    .data()
                    .iter()
                    .zip(xhat.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / x.len() as f64
                    / images.len() as f64;
            }
            out.push(xhat);
        }
        Ok(out)
    };
    let train_set = decode_set(&split.train.images, false)?;
    let eval_set = decode_set(&split.eval.images, true)?;
    let mut p = RdPoint::sized(format!("RDC-{depth}"), depth as f64, seed, mean(sizes));
    p.distortion_mse = distortion;
    p.probe_accuracy = finetune(
        model,
        &train_set,
        &split.train.labels,
        &eval_set,
        &split.eval.labels,
        cfg,
        seed,
    )?
    .accuracy;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::data::{synthetic, SyntheticOptions};
    use rand::Rng;

    fn small() -> (Split, BenchConfig) {
        let split = synthetic(&SyntheticOptions {
            train: 48,
            eval: 24,
            seed: 3,
            ..SyntheticOptions::default()
        })
        .unwrap();
        let cfg = BenchConfig {
            pretrain_steps: 20,
            adapt_steps: 10,
            rdc_epochs: 1,
            probe: ProbeConfig {
                epochs: 5,
                ..ProbeConfig::default()
            },
            ..BenchConfig::default()
        };
        (split, cfg)
    }

    #[test]
    fn float32_storage_matches_raw_embeddings() {
        let (split, cfg) = small();
        let (model, _) = pretrain(&split.train.images, &cfg, 0).unwrap();
        let p = run_uqe(&model, &split, UqeBits::F32, &cfg, 0).unwrap();
        let tr = embed_all(&model, &split.train.images, 0.0, 0).unwrap();
        let ev = embed_all(&model, &split.eval.images, 0.0, 0).unwrap();
        let probe = ProbeConfig {
            seed: 0,
            ..cfg.probe.clone()
        };
        let raw = train_probe(&tr, &split.train.labels, &ev, &split.eval.labels, &probe, None).unwrap();
        assert_eq!(p.probe_accuracy, raw.accuracy);
        assert_eq!(p.bits_per_sample, 8.0 * p.bytes_per_sample);
    }

    #[test]
    fn fewer_uqe_bits_cost_less() {
        let (split, cfg) = small();
        let (model, _) = pretrain(&split.train.images, &cfg, 0).unwrap();
        let b2 = run_uqe(&model, &split, UqeBits::Int(2), &cfg, 0).unwrap();
        let b8 = run_uqe(&model, &split, UqeBits::Int(8), &cfg, 0).unwrap();
        assert!(b2.bits_per_sample < b8.bits_per_sample);
    }

    #[test]
    fn uqe_constant_embedding_uses_marker() {
        let y = Tensor::filled(&[4, 3], 0.25);
        let coder = AdaptiveOrder0::default();
        let a = uqe_archive(&y, UqeBits::Int(2), &coder).unwrap();
        assert!(a.payload.is_empty());
        assert_eq!(
            uqe_decode(&Archive::unpack(&a.pack().unwrap()).unwrap(), &coder).unwrap(),
            y
        );
    }

    #[test]
    fn nec_transport_is_lossless_on_symbols() {
        let (split, cfg) = small();
        let (model, _) = pretrain(&split.train.images, &cfg, 1).unwrap();
        let (adapted, density, _) = adapt(&model, &split.train.images, 1000.0, &cfg, 1).unwrap();
        let t = nec_transport(&adapted, &density, &split, &cfg, 1).unwrap();
        for (i, x) in split.eval.images.iter().enumerate() {
            let y = adapted.embed_with_ratio(x, 0.0, 1 + i as u64).unwrap();
            assert_eq!(t.eval[i], y.map(f64::round));
        }
        let p = run_nec(&adapted, &t, &split, 1000.0, &cfg, false, 1).unwrap();
        let mean_payload = t.payload_bytes.iter().sum::<usize>() as f64 / t.payload_bytes.len() as f64;
        assert_eq!(p.bytes_per_sample, mean_payload);
        assert_eq!(p.bits_per_sample, 8.0 * mean_payload);
        assert_eq!(p.one_time_cost_bytes, t.density_blob_bytes as u64);
    }

    #[test]
    fn rdc_depths_and_random_images() {
        let (split, cfg) = small();
        let (model, _) = pretrain(&split.train.images, &cfg, 2).unwrap();
        let d8 = run_rdc(&model, &split, 8, &cfg, 2).unwrap();
        let d16 = run_rdc(&model, &split, 16, &cfg, 2).unwrap();
        assert!(d8.bits_per_sample <= d16.bits_per_sample);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::new(vec![1, 64, 64], (0..4096).map(|_| rng.random::<f64>()).collect()).unwrap();
        let coder = AdaptiveOrder0::default();
        let a = rdc_archive(&x, 8, &coder).unwrap();
        assert!(a.payload.len() as f64 >= 0.99 * 4096.0, "{}", a.payload.len());
        let back = rdc_decode(&Archive::unpack(&a.pack().unwrap()).unwrap(), &coder).unwrap();
        assert!(x
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn raw_depth_is_validated() {
        assert!(raw_bytes(&Tensor::filled(&[1, 2, 2], 0.5), 12).is_err());
    }

    #[test]
    fn transport_needs_unmasked_grids() {
        let (split, mut cfg) = small();
        let (model, _) = pretrain(&split.train.images, &cfg, 0).unwrap();
        cfg.eval_mask_ratio = 0.5;
        assert!(matches!(
            run_uqe(&model, &split, UqeBits::F32, &cfg, 0),
            Err(Error::Config(_))
        ));
    }
}
