//! Seeded synthetic image classification data.
//!
//! Three classes on a `C×S×S` canvas in `[0, 1]`: Gaussian blobs,
//! near-horizontal stripes, and near-vertical stripes, each with random
//! placement, frequency, phase and contrast plus additive pixel noise.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{tnsr, Tensor};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Disjoint train and held-out sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub eval: Dataset,
}

#[derive(Clone, Debug)]
pub struct SyntheticOptions {
    pub image_size: usize,
    pub channels: usize,
    pub train: usize,
    pub eval: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            train: 600,
            eval: 300,
            noise: 0.15,
            seed: 0,
        }
    }
}

fn render(class: usize, opts: &SyntheticOptions, rng: &mut ChaCha8Rng) -> Tensor {
    let s = opts.image_size;
    let sf = s as f64;
    let mut canvas = vec![0.0; s * s];
    match class {
        0 => {
            let base = rng.random_range(0.2..0.4);
            canvas.fill(base);
            for _ in 0..rng.random_range(1..=3) {
                let (cy, cx) = (rng.random_range(0.0..sf), rng.random_range(0.0..sf));
                let sigma = rng.random_range(0.1..0.2) * sf;
                let amp = rng.random_range(0.25..0.6);
                for r in 0..s {
                    for c in 0..s {
                        let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                        canvas[r * s + c] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
        _ => {
            let tilt = rng.random_range(-0.45..0.45);
            let angle = if class == 1 {
                tilt
            } else {
                std::f64::consts::FRAC_PI_2 + tilt
            };
            let freq = rng.random_range(0.6..1.4);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let contrast = rng.random_range(0.12..0.35);
            // stripes run along `angle`, so intensity varies across it
            let (dy, dx) = (angle.cos(), -angle.sin());
            for r in 0..s {
                for c in 0..s {
                    let u = r as f64 * dy + c as f64 * dx;
                    canvas[r * s + c] = 0.5 + contrast * (freq * u + phase).sin();
                }
            }
        }
    }
    let noise = Normal::new(0.0, opts.noise.max(0.0)).unwrap();
    let mut data = Vec::with_capacity(opts.channels * s * s);
    for ch in 0..opts.channels {
        let gain = 1.0 - 0.1 * ch as f64;
        data.extend(canvas.iter().map(|&v| (v * gain + noise.sample(rng)).clamp(0.0, 1.0)));
    }
    Tensor::new(vec![opts.channels, s, s], data).unwrap()
}

/// Balanced classes (`label = index mod 3`), train images first, all from one
/// seeded stream.
pub fn synthetic(opts: &SyntheticOptions) -> Result<Split> {
    if opts.image_size == 0 || !(1..=3).contains(&opts.channels) {
        return Err(Error::Config(
            "synthetic images need size > 0 and 1 to 3 channels".into(),
        ));
    }
    if !(opts.noise >= 0.0) {
        return Err(Error::Config(format!("noise {} must be non-negative", opts.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut make = |count: usize| {
        let mut d = Dataset::default();
        for i in 0..count {
            let class = i % NUM_CLASSES;
            d.images.push(render(class, opts, &mut rng));
            d.labels.push(class);
        }
        d
    };
    let train = make(opts.train);
    let eval = make(opts.eval);
    Ok(Split { train, eval })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LabelRow {
    file: String,
    label: usize,
    split: String,
}

/// Writes `train/NNNNN.tnsr`, `eval/NNNNN.tnsr` (f32) and `labels.csv`.
pub fn write_split(dir: impl AsRef<Path>, split: &Split) -> Result<()> {
    let dir = dir.as_ref();
    let mut w = csv::Writer::from_path(dir.join("labels.csv")).map_err(csv_err)?;
    for (name, set) in [("train", &split.train), ("eval", &split.eval)] {
        fs::create_dir_all(dir.join(name))?;
        for (i, (img, &label)) in set.images.iter().zip(&set.labels).enumerate() {
            let file = format!("{name}/{i:05}.tnsr");
            tnsr::write(dir.join(&file), img, tnsr::DType::F32)?;
            w.serialize(LabelRow {
                file,
                label,
                split: name.into(),
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(dir: impl AsRef<Path>) -> Result<Split> {
    let dir = dir.as_ref();
    let mut r = csv::Reader::from_path(dir.join("labels.csv")).map_err(csv_err)?;
    let mut split = Split::default();
    for row in r.deserialize() {
        let row: LabelRow = row.map_err(csv_err)?;
        let set = match row.split.as_str() {
            "train" => &mut split.train,
            "eval" => &mut split.eval,
            other => return Err(Error::format("split", format!("unknown split `{other}`"))),
        };
        set.images.push(tnsr::read(dir.join(&row.file))?);
        set.labels.push(row.label);
    }
    if split.train.is_empty() {
        return Err(Error::Config(format!("{} holds no training images", dir.display())));
    }
    Ok(split)
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("labels.csv", e.to_string())
}
