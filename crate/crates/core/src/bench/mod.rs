//! Benchmark harness: frozen-embedding probes, the NEC / UQE / RDC
//! pipelines, and rate–accuracy sweeps written as CSV and SVG.

mod pipeline;
mod plot;
mod probe;

pub use pipeline::{
    adapt, embed_all, evaluate_objective, finetune, lambda_scale, nec_transport, new_density, pretrain, raw_bytes,
    rdc_archive, rdc_decode, run_nec, run_rdc, run_uqe, uqe_archive, uqe_decode, BenchConfig, NecTransport, RdPoint,
    UqeBits,
};
pub use plot::plot_svg;
pub use probe::{train_probe, Pooling, ProbeConfig, ProbeResult};

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mae::data::Split;

/// What to run in a [`sweep`].
#[derive(Clone, Debug)]
pub struct SweepSpec {
    /// Explicit λ values; when empty, `lambda_factors` scale the balance
    /// point of the first seed's pretrained model.
    pub lambdas: Vec<f64>,
    pub lambda_factors: Vec<f64>,
    pub uqe: Vec<UqeBits>,
    pub rdc: Vec<u8>,
    pub seeds: Vec<u64>,
    /// Also probe every NEC point through the decoder prefix.
    pub prefix: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            lambdas: vec![],
            lambda_factors: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            uqe: vec![
                UqeBits::Int(2),
                UqeBits::Int(3),
                UqeBits::Int(5),
                UqeBits::Int(8),
                UqeBits::F16,
                UqeBits::F32,
            ],
            rdc: vec![8, 16],
            seeds: vec![0, 1, 2],
            prefix: true,
        }
    }
}

/// One CSV row: a measured point or the error that prevented it.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub setting: f64,
    pub seed: u64,
    pub point: std::result::Result<RdPoint, String>,
    pub pareto: bool,
}

impl SweepRow {
    fn bits(&self) -> f64 {
        self.point.as_ref().map_or(f64::NAN, |p| p.bits_per_sample)
    }
}

#[derive(Clone, Debug)]
enum Job {
    Nec(f64),
    Uqe(UqeBits),
    Rdc(u8),
}

fn error_rows(job: &Job, seed: u64, prefix: bool, err: &str) -> Vec<SweepRow> {
    let row = |method: String, setting: f64| SweepRow {
        method,
        setting,
        seed,
        point: Err(err.to_string()),
        pareto: false,
    };
    match job {
        Job::Nec(l) => {
            let mut v = vec![row("NEC".into(), *l)];
            if prefix {
                v.push(row("NEC+prefix".into(), *l));
            }
            v
        }
        Job::Uqe(b) => vec![row(b.label(), b.bits() as f64)],
        Job::Rdc(d) => vec![row(format!("RDC-{d}"), *d as f64)],
    }
}

/// The λ values a sweep will train, resolving automatic scaling.
pub fn resolve_lambdas(split: &Split, spec: &SweepSpec, cfg: &BenchConfig) -> Result<Vec<f64>> {
    if !spec.lambdas.is_empty() {
        return Ok(spec.lambdas.clone());
    }
    let seed = *spec
        .seeds
        .first()
        .ok_or_else(|| Error::Config("sweep needs a seed".into()))?;
    let (model, _) = pretrain(&split.train.images, cfg, seed)?;
    let c = lambda_scale(&model, &split.train.images, cfg, seed)?;
    Ok(spec.lambda_factors.iter().map(|f| f * c).collect())
}

/// Runs every (method, setting, seed) combination. Jobs run in parallel;
/// output order and content depend only on the inputs. A failing job yields
/// error rows and the sweep continues.
pub fn sweep(split: &Split, spec: &SweepSpec, cfg: &BenchConfig) -> Result<Vec<SweepRow>> {
    if spec.seeds.is_empty()
        || (spec.lambdas.is_empty() && spec.lambda_factors.is_empty() && spec.uqe.is_empty() && spec.rdc.is_empty())
    {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let pretrained: Vec<_> = spec
        .seeds
        .par_iter()
        .map(|&s| {
            pretrain(&split.train.images, cfg, s)
                .map(|(m, _)| m)
                .map_err(|e| e.to_string())
        })
        .collect();
    let lambdas = if !spec.lambdas.is_empty() || spec.lambda_factors.is_empty() {
        spec.lambdas.clone()
    } else {
        let first = pretrained[0]
            .as_ref()
            .map_err(|e| Error::Config(format!("cannot calibrate lambda: pretraining failed: {e}")))?;
        let c = lambda_scale(first, &split.train.images, cfg, spec.seeds[0])?;
        spec.lambda_factors.iter().map(|f| f * c).collect()
    };

    let mut jobs = Vec::new();
    for (si, &seed) in spec.seeds.iter().enumerate() {
        jobs.extend(lambdas.iter().map(|&l| (si, seed, Job::Nec(l))));
        jobs.extend(spec.uqe.iter().map(|&b| (si, seed, Job::Uqe(b))));
        jobs.extend(spec.rdc.iter().map(|&d| (si, seed, Job::Rdc(d))));
    }
    let results: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|(si, seed, job)| {
            let model = match &pretrained[*si] {
                Ok(m) => m,
                Err(e) => return error_rows(job, *seed, spec.prefix, &format!("pretraining: {e}")),
            };
            let run = || -> Result<Vec<RdPoint>> {
                match job {
                    Job::Nec(lambda) => {
                        let (adapted, density, _) = adapt(model, &split.train.images, *lambda, cfg, *seed)?;
                        let t = nec_transport(&adapted, &density, split, cfg, *seed)?;
                        let mut pts = vec![run_nec(&adapted, &t, split, *lambda, cfg, false, *seed)?];
                        if spec.prefix {
                            pts.push(run_nec(&adapted, &t, split, *lambda, cfg, true, *seed)?);
                        }
                        Ok(pts)
                    }
                    Job::Uqe(b) => Ok(vec![run_uqe(model, split, *b, cfg, *seed)?]),
                    Job::Rdc(d) => Ok(vec![run_rdc(model, split, *d, cfg, *seed)?]),
                }
            };
            match run() {
                Ok(points) => points
                    .into_iter()
                    .map(|p| SweepRow {
                        method: p.method.clone(),
                        setting: p.setting,
                        seed: *seed,
                        point: Ok(p),
                        pareto: false,
                    })
                    .collect(),
                Err(e) => error_rows(job, *seed, spec.prefix, &e.to_string()),
            }
        })
        .collect();

    let mut rows: Vec<SweepRow> = results.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.bits().total_cmp(&b.bits()))
            .then(a.setting.total_cmp(&b.setting))
            .then(a.seed.cmp(&b.seed))
    });
    flag_pareto(&mut rows);
    Ok(rows)
}

/// Marks rows no other successful row dominates (fewer or equal bits with
/// at least equal accuracy, one strictly better).
pub fn flag_pareto(rows: &mut [SweepRow]) {
    let pts: Vec<Option<(f64, f64)>> = rows
        .iter()
        .map(|r| r.point.as_ref().ok().map(|p| (p.bits_per_sample, p.probe_accuracy)))
        .collect();
    for (i, row) in rows.iter_mut().enumerate() {
        row.pareto = match pts[i] {
            None => false,
            Some((b, a)) => !pts
                .iter()
                .flatten()
                .any(|&(b2, a2)| b2 <= b && a2 >= a && (b2 < b || a2 > a)),
        };
    }
}

pub const CSV_HEADER: [&str; 11] = [
    "method",
    "setting",
    "seed",
    "bits_per_sample",
    "bytes_per_sample",
    "distortion_mse",
    "probe_accuracy",
    "analytic_rate_bits",
    "one_time_cost_bytes",
    "pareto",
    "status",
];

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::format("csv", e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows {
        let rec: Vec<String> = match &r.point {
            Ok(p) => vec![
                r.method.clone(),
                r.setting.to_string(),
                r.seed.to_string(),
                p.bits_per_sample.to_string(),
                p.bytes_per_sample.to_string(),
                p.distortion_mse.to_string(),
                p.probe_accuracy.to_string(),
                p.analytic_rate_bits.map_or(String::new(), |v| v.to_string()),
                p.one_time_cost_bytes.to_string(),
                r.pareto.to_string(),
                "ok".into(),
            ],
            Err(e) => {
                let mut v = vec![r.method.clone(), r.setting.to_string(), r.seed.to_string()];
                v.extend(std::iter::repeat_n(String::new(), 6));
                v.push("false".into());
                v.push(format!("error: {e}"));
                v
            }
        };
        w.write_record(&rec).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}
