use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use embcodec::bench::{
    adapt, plot_svg, rdc_archive, rdc_decode, sweep, train_probe, uqe_archive, uqe_decode, write_csv, BenchConfig,
    Pooling, ProbeConfig, ProbeResult, SweepRow, SweepSpec, UqeBits,
};
use embcodec::codec::{model_id, range_decode, range_encode, AdaptiveOrder0, Archive, ModeHeader, TableSource};
use embcodec::entropy::{
    build_pmf_tables, decode_density, encode_density, FactorizedDensity, FitOptions, DEFAULT_FILTERS,
};
use embcodec::mae::data::{read_split, synthetic, write_split, Split, SyntheticOptions};
use embcodec::mae::{
    decode_checkpoint, encode_checkpoint, train, FreezeMask, MaeConfig, MaeModel, Objective, TrainOptions, TrainStep,
};
use embcodec::numerics::{tnsr, Tensor};
use embcodec::quantizer::round_quantize;
use log::{info, warn};
use serde_json::json;

use crate::config::{ConfigFile, Resolver};
use crate::manifest::RunManifest;
use crate::{CliError, CompressArgs, DecompressArgs, GenDataArgs, ProbeArgs, Result, SweepArgs, TrainArgs, SEED_ENV};

/// `--seed`, then the config file, then `EMBCODEC_SEED`, then 0.
fn seed(r: &mut Resolver, flag: Option<u64>) -> Result<u64> {
    if let Some(s) = r.optional("seed", flag)? {
        return Ok(s);
    }
    let s = match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
        Err(_) => 0,
    };
    r.note("seed", s);
    Ok(s)
}

fn finish(r: Resolver) -> std::collections::BTreeMap<String, String> {
    for key in r.unused_keys() {
        warn!("config key `{key}` is not used by this command");
    }
    r.into_snapshot()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_model(path: &Path) -> Result<MaeModel> {
    Ok(decode_checkpoint(&read_bytes(path)?)?)
}

fn read_density(path: &Path) -> Result<FactorizedDensity> {
    Ok(decode_density(&read_bytes(path)?)?)
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Training images: the train split of a `gen-data` directory, or every
/// `.tnsr` file directly inside `dir`, by name.
fn load_images(dir: &Path) -> Result<Vec<Tensor>> {
    if dir.join("labels.csv").is_file() {
        return Ok(read_split(dir)?.train.images);
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tnsr"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("{} contains no .tnsr files", dir.display())));
    }
    files.iter().map(|p| Ok(tnsr::read(p)?)).collect()
}

pub fn cmd_gen_data(args: &GenDataArgs, config: &ConfigFile) -> Result<()> {
    let started = Instant::now();
    let mut r = Resolver::new(config);
    let out = PathBuf::from(r.required::<String>("out", args.out.clone())?);
    let d = SyntheticOptions::default();
    let opts = SyntheticOptions {
        train: r.value("train", args.train, d.train)?,
        eval: r.value("eval", args.eval, d.eval)?,
        noise: r.value("noise", args.noise, d.noise)?,
        image_size: r.value("image-size", args.image_size, d.image_size)?,
        seed: seed(&mut r, args.seed)?,
        ..d
    };
    let split = synthetic(&opts)?;
    create_dir(&out)?;
    write_split(&out, &split)?;
    info!(
        "wrote {} train and {} eval images to {}",
        opts.train,
        opts.eval,
        out.display()
    );
    let mut m = RunManifest::new("gen-data", finish(r), vec![opts.seed], started);
    m.outputs = vec![path_str(&out.join("labels.csv"))];
    m.write(&out.join("manifest.json"))
}

pub fn cmd_train(args: &TrainArgs, config: &ConfigFile) -> Result<()> {
    let started = Instant::now();
    let mut r = Resolver::new(config);
    let data = PathBuf::from(r.required::<String>("data", args.data.clone())?);
    let out = PathBuf::from(r.required::<String>("out", args.out.clone())?);
    let init = r.optional::<String>("init", args.init.clone())?.map(PathBuf::from);
    let lambda = r.optional("lambda", args.lambda)?;
    let steps = r.value("steps", args.steps, 1000)?;
    let lr = r.value("lr", args.lr, 2e-3)?;
    let density_lr = r.value("density-lr", args.density_lr, 1e-2)?;
    let batch_size = r.value("batch-size", args.batch_size, 16)?;
    let freeze_name = r.value(
        "freeze",
        args.freeze.clone(),
        if init.is_some() { "partial" } else { "none" }.to_string(),
    )?;
    let freeze = FreezeMask::parse(&freeze_name).map_err(|e| CliError::Usage(e.to_string()))?;
    let mask_ratio = r.value("mask-ratio", args.mask_ratio, if lambda.is_some() { 0.0 } else { 0.75 })?;
    let seed = seed(&mut r, args.seed)?;

    let images = load_images(&data)?;
    let model = match &init {
        Some(path) => {
            let m = read_model(path)?;
            let config = MaeConfig {
                mask_ratio,
                ..m.config().clone()
            };
            MaeModel::from_params(config, m.params().to_vec())?
        }
        None => {
            let shape = images[0].shape();
            if shape.len() != 3 || shape[1] != shape[2] {
                return Err(CliError::Usage(format!("images must be C×S×S tensors, got {shape:?}")));
            }
            let config = MaeConfig {
                channels: shape[0],
                image_size: shape[1],
                mask_ratio,
                ..MaeConfig::default()
            };
            MaeModel::new(config, seed)?
        }
    };
    let (model, density, trace) = match lambda {
        Some(lambda) => {
            let cfg = BenchConfig {
                adapt_steps: steps,
                adapt_lr: lr,
                density_lr,
                batch_size,
                freeze,
                eval_mask_ratio: mask_ratio,
                ..BenchConfig::default()
            };
            info!("adapting at lambda {lambda} for {steps} steps");
            adapt(&model, &images, lambda, &cfg, seed)?
        }
        None => {
            let mut model = model;
            let opts = TrainOptions {
                steps,
                lr,
                batch_size,
                objective: Objective::Reconstruction,
                freeze,
                seed,
                ..TrainOptions::default()
            };
            info!("pre-training for {steps} steps");
            let trace = train(&mut model, None, &images, &opts)?;
            // a density for the unmasked, rounded embeddings of the data
            let grids = images
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    Ok(model
                        .embed_with_ratio(x, 0.0, seed.wrapping_add(i as u64))?
                        .map(f64::round))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut density = FactorizedDensity::new(model.config().embed_dim, &DEFAULT_FILTERS, 10.0, seed)?;
            density.fit(&grids, FitOptions::default())?;
            density.record_ranges(&grids)?;
            (model, density, trace)
        }
    };

    create_dir(&out)?;
    let ckpt = out.join("model.ckpt");
    let blob = out.join("density.bin");
    let trace_path = out.join("trace.csv");
    write_bytes(&ckpt, &encode_checkpoint(&model)?)?;
    write_bytes(&blob, &encode_density(&density))?;
    write_trace(&trace_path, &trace)?;

    let (trainable, total) = model.trainable_count(&freeze);
    let fraction = trainable as f64 / total as f64;
    info!(
        "trainable parameters: {trainable} of {total} ({:.2}%)",
        100.0 * fraction
    );
    let mut m = RunManifest::new("train", finish(r), vec![seed], started);
    m.inputs = vec![path_str(&data)];
    m.inputs.extend(init.as_deref().map(path_str));
    m.outputs = [&ckpt, &blob, &trace_path].iter().map(|p| path_str(p)).collect();
    m.results.insert("trainable_params".into(), json!(trainable));
    m.results.insert("total_params".into(), json!(total));
    m.results.insert("trainable_fraction".into(), json!(fraction));
    if let Some(last) = trace.last() {
        m.results.insert("final_loss".into(), json!(last.loss));
    }
    m.write(&out.join("manifest.json"))
}

fn write_trace(path: &Path, trace: &[TrainStep]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| CliError::Usage(format!("{}: {e}", path.display()));
    w.write_record(["step", "loss", "distortion", "rate"]).map_err(err)?;
    for (i, s) in trace.iter().enumerate() {
        w.write_record([
            i.to_string(),
            s.loss.to_string(),
            s.distortion.to_string(),
            s.rate.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Returns the summary line printed on standard output.
pub fn cmd_compress(args: &CompressArgs, config: &ConfigFile) -> Result<String> {
    let started = Instant::now();
    let mut r = Resolver::new(config);
    let mode = r.required::<String>("mode", args.mode.clone())?;
    let input = PathBuf::from(r.required::<String>("input", args.input.clone())?);
    let out = PathBuf::from(r.required::<String>("out", args.out.clone())?);
    let model_path = r.optional::<String>("model", args.model.clone())?.map(PathBuf::from);
    let density_path = r
        .optional::<String>("density", args.density.clone())?
        .map(PathBuf::from);
    let bits = r.optional::<String>("bits", args.bits.clone())?;
    let embed_tables = r.switch("embed-tables", args.embed_tables)?;
    let precision = r.value("precision", args.precision, 16u8)?;
    let seed = seed(&mut r, args.seed)?;

    let (needs, forbids): (&[&str], &[&str]) = match mode.as_str() {
        "nec" => (&["model", "density"], &["bits"]),
        "uqe" => (&["model", "bits"], &["density", "embed-tables"]),
        "rdc" => (&["bits"], &["model", "density", "embed-tables"]),
        other => {
            return Err(CliError::Usage(format!(
                "unknown --mode `{other}`, expected nec, uqe or rdc"
            )))
        }
    };
    let given = |flag: &str| match flag {
        "model" => model_path.is_some(),
        "density" => density_path.is_some(),
        "bits" => bits.is_some(),
        _ => embed_tables,
    };
    let missing: Vec<String> = needs.iter().filter(|f| !given(f)).map(|f| format!("--{f}")).collect();
    if !missing.is_empty() {
        return Err(CliError::Usage(format!("mode {mode} requires {}", missing.join(", "))));
    }
    let extra: Vec<String> = forbids.iter().filter(|f| given(f)).map(|f| format!("--{f}")).collect();
    if !extra.is_empty() {
        return Err(CliError::Usage(format!(
            "mode {mode} does not take {}",
            extra.join(", ")
        )));
    }

    let x = tnsr::read(&input)?;
    let coder = AdaptiveOrder0::default();
    let mut inputs = vec![path_str(&input)];
    let mut analytic = None;
    let archive = match mode.as_str() {
        "nec" => {
            let (mp, dp) = (model_path.unwrap(), density_path.unwrap());
            let model = read_model(&mp)?;
            let density = read_density(&dp)?;
            inputs.extend([path_str(&mp), path_str(&dp)]);
            let ranges = density
                .ranges()
                .ok_or_else(|| CliError::Usage(format!("{} records no symbol ranges", dp.display())))?
                .to_vec();
            let tables = build_pmf_tables(&density, &ranges, precision)?;
            let y = model.embed_with_ratio(&x, 0.0, seed)?;
            let q = round_quantize(&y)?;
            analytic = Some(density.rate_bits(&q.to_tensor())?);
            let payload = range_encode(&q, &tables)?;
            Archive {
                channels: q.channels() as u16,
                tokens: q.tokens() as u32,
                precision_bits: precision,
                header: ModeHeader::Nec {
                    ranges,
                    tables: if embed_tables {
                        TableSource::Embedded(tables)
                    } else {
                        TableSource::Referenced(model_id(&density))
                    },
                },
                payload,
            }
        }
        "uqe" => {
            let mp = model_path.unwrap();
            let model = read_model(&mp)?;
            inputs.push(path_str(&mp));
            let b = UqeBits::parse(bits.as_deref().unwrap()).map_err(|e| CliError::Usage(e.to_string()))?;
            uqe_archive(&model.embed_with_ratio(&x, 0.0, seed)?, b, &coder)?
        }
        _ => {
            let depth = match bits.as_deref().unwrap() {
                "8" => 8,
                "16" => 16,
                other => return Err(CliError::Usage(format!("RDC --bits `{other}` must be 8 or 16"))),
            };
            rdc_archive(&x, depth, &coder)?
        }
    };
    let bytes = archive.pack()?;
    write_bytes(&out, &bytes)?;

    let line = format!(
        "mode={mode} payload_bytes={} archive_bytes={} analytic_rate_bits={}",
        archive.payload.len(),
        bytes.len(),
        analytic.map_or("none".to_string(), |b| format!("{b:.3}"))
    );
    let mut m = RunManifest::new("compress", finish(r), vec![seed], started);
    m.inputs = inputs;
    m.outputs = vec![path_str(&out)];
    m.results.insert("payload_bytes".into(), json!(archive.payload.len()));
    m.results.insert("archive_bytes".into(), json!(bytes.len()));
    m.results.insert("analytic_rate_bits".into(), json!(analytic));
    m.write(&sidecar(&out))?;
    Ok(line)
}

/// Writes the decoded tensor: symbols for NEC, dequantised values for UQE,
/// the image for RDC. Returns the summary line.
pub fn cmd_decompress(args: &DecompressArgs, config: &ConfigFile) -> Result<String> {
    let started = Instant::now();
    let mut r = Resolver::new(config);
    let input = PathBuf::from(r.required::<String>("input", args.input.clone())?);
    let out = PathBuf::from(r.required::<String>("out", args.out.clone())?);
    let density_path = r
        .optional::<String>("density", args.density.clone())?
        .map(PathBuf::from);

    let archive = Archive::unpack(&read_bytes(&input)?)?;
    let coder = AdaptiveOrder0::default();
    let mut inputs = vec![path_str(&input)];
    let (mode, tensor) = match &archive.header {
        ModeHeader::Nec { ranges, tables } => {
            let built;
            let tables = match tables {
                TableSource::Embedded(t) => t,
                TableSource::Referenced(id) => {
                    let dp = density_path.ok_or_else(|| {
                        CliError::Usage(format!("archive references density {id:016x}; pass --density"))
                    })?;
                    let density = read_density(&dp)?;
                    if model_id(&density) != *id {
                        return Err(CliError::Usage(format!(
                            "{} has id {:016x}, archive needs {id:016x}",
                            dp.display(),
                            model_id(&density)
                        )));
                    }
                    inputs.push(path_str(&dp));
                    built = build_pmf_tables(&density, ranges, archive.precision_bits)?;
                    &built
                }
            };
            let q = range_decode(
                &archive.payload,
                tables,
                archive.channels as usize,
                archive.tokens as usize,
            )?;
            ("nec", q.to_tensor())
        }
        ModeHeader::Uqe(_) => ("uqe", uqe_decode(&archive, &coder)?),
        ModeHeader::Rdc { .. } => ("rdc", rdc_decode(&archive, &coder)?),
    };
    tnsr::write(&out, &tensor, tnsr::DType::F64)?;
    let shape: Vec<String> = tensor.shape().iter().map(usize::to_string).collect();
    let mut m = RunManifest::new("decompress", finish(r), vec![], started);
    m.inputs = inputs;
    m.outputs = vec![path_str(&out)];
    m.results.insert("mode".into(), json!(mode));
    m.results.insert("shape".into(), json!(tensor.shape()));
    m.write(&sidecar(&out))?;
    Ok(format!("mode={mode} shape={}", shape.join("x")))
}

fn uqe_list(raw: &str) -> Result<Vec<UqeBits>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| UqeBits::parse(s).map_err(|e| CliError::Usage(format!("--uqe-bits: {e}"))))
        .collect()
}

pub fn cmd_sweep(args: &SweepArgs, config: &ConfigFile) -> Result<Vec<SweepRow>> {
    let started = Instant::now();
    let mut r = Resolver::new(config);
    let data = r.optional::<String>("data", args.data.clone())?.map(PathBuf::from);
    let out = PathBuf::from(r.required::<String>("out", args.out.clone())?);
    let spec = SweepSpec {
        lambdas: r.list("lambdas", args.lambdas.clone(), "")?,
        lambda_factors: r.list("lambda-factors", args.lambda_factors.clone(), "0.01,0.1,1,10,100")?,
        uqe: uqe_list(&r.value("uqe-bits", args.uqe_bits.clone(), "2,3,5,8,f16,f32".to_string())?)?,
        rdc: r.list("rdc-bits", args.rdc_bits.clone(), "8,16")?,
        seeds: r.list("seeds", args.seeds.clone(), "0,1,2")?,
        prefix: !r.switch("no-prefix", args.no_prefix)?,
    };
    if let Some(bad) = spec.rdc.iter().find(|&&b| b != 8 && b != 16) {
        return Err(CliError::Usage(format!("--rdc-bits: {bad} is not 8 or 16")));
    }
    let b = BenchConfig::default();
    let pooling = r.value("pooling", args.pooling.clone(), "mean".to_string())?;
    let cfg = BenchConfig {
        pretrain_steps: r.value("pretrain-steps", args.pretrain_steps, b.pretrain_steps)?,
        adapt_steps: r.value("adapt-steps", args.adapt_steps, b.adapt_steps)?,
        rdc_epochs: r.value("rdc-epochs", args.rdc_epochs, b.rdc_epochs)?,
        precision_bits: r.value("precision", args.precision, b.precision_bits)?,
        fully_loaded: r.switch("fully-loaded", args.fully_loaded)?,
        probe: ProbeConfig {
            pooling: Pooling::parse(&pooling).map_err(|e| CliError::Usage(e.to_string()))?,
            epochs: r.value("probe-epochs", args.probe_epochs, b.probe.epochs)?,
            ..b.probe.clone()
        },
        ..b
    };
    let split = match &data {
        Some(dir) => read_split(dir)?,
        None => synthetic(&SyntheticOptions::default())?,
    };
    info!(
        "sweeping {} seeds over {} lambda, {} UQE and {} RDC settings",
        spec.seeds.len(),
        if spec.lambdas.is_empty() {
            spec.lambda_factors.len()
        } else {
            spec.lambdas.len()
        },
        spec.uqe.len(),
        spec.rdc.len()
    );
    let rows = sweep(&split, &spec, &cfg)?;
    let failed = rows.iter().filter(|r| r.point.is_err()).count();
    if failed > 0 {
        warn!("{failed} of {} sweep rows failed; see the status column", rows.len());
    }

    create_dir(&out)?;
    let csv_path = out.join("rd.csv");
    let svg_path = out.join("rd.svg");
    let file = fs::File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    write_csv(&rows, file)?;
    let title = match &data {
        Some(dir) => format!("accuracy vs bits: {}", dir.display()),
        None => "accuracy vs bits: synthetic task".to_string(),
    };
    plot_svg(&rows, &svg_path, &title)?;
    info!("wrote {} rows to {}", rows.len(), csv_path.display());

    let mut lambdas: Vec<f64> = rows.iter().filter(|r| r.method == "NEC").map(|r| r.setting).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let mut m = RunManifest::new("sweep", finish(r), spec.seeds.clone(), started);
    m.inputs = data.iter().map(|p| path_str(p)).collect();
    m.outputs = vec![path_str(&csv_path), path_str(&svg_path)];
    m.results.insert("rows".into(), json!(rows.len()));
    m.results.insert("failed_rows".into(), json!(failed));
    m.results.insert("lambdas".into(), json!(lambdas));
    m.write(&out.join("manifest.json"))?;
    Ok(rows)
}

pub fn cmd_probe(args: &ProbeArgs, config: &ConfigFile) -> Result<ProbeResult> {
    let mut r = Resolver::new(config);
    let data = PathBuf::from(r.required::<String>("data", args.data.clone())?);
    let model_path = r.optional::<String>("model", args.model.clone())?.map(PathBuf::from);
    let d = ProbeConfig::default();
    let pooling = r.value("pooling", args.pooling.clone(), "mean".to_string())?;
    let cfg = ProbeConfig {
        pooling: Pooling::parse(&pooling).map_err(|e| CliError::Usage(e.to_string()))?,
        epochs: r.value("epochs", args.epochs, d.epochs)?,
        lr: r.value("lr", args.lr, d.lr)?,
        batch_size: r.value("batch-size", args.batch_size, d.batch_size)?,
        weight_decay: r.value("weight-decay", args.weight_decay, d.weight_decay)?,
        prefix: r.switch("prefix", args.prefix)?,
        seed: seed(&mut r, args.seed)?,
    };
    if cfg.prefix && model_path.is_none() {
        return Err(CliError::Usage("--prefix requires --model".into()));
    }
    finish(r);
    let split: Split = read_split(&data)?;
    let model = model_path.as_deref().map(read_model).transpose()?;
    let embed = |images: &[Tensor]| -> Result<Vec<Tensor>> {
        match &model {
            Some(m) => images
                .iter()
                .enumerate()
                .map(|(i, x)| Ok(m.embed_with_ratio(x, 0.0, cfg.seed.wrapping_add(i as u64))?))
                .collect(),
            None => Ok(images.to_vec()),
        }
    };
    let train_set = embed(&split.train.images)?;
    let eval_set = embed(&split.eval.images)?;
    Ok(train_probe(
        &train_set,
        &split.train.labels,
        &eval_set,
        &split.eval.labels,
        &cfg,
        model.as_ref(),
    )?)
}
