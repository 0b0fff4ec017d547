use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FreezeMask, MaeModel};
use crate::entropy::FactorizedDensity;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Plain masked reconstruction, no bottleneck noise or rate.
    Reconstruction,
    /// `λ·D + R` with noise in place of rounding.
    RateDistortion { lambda: f64 },
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    /// Adam step size for the model.
    pub lr: f64,
    /// Adam step size for the density; 0 keeps it fixed.
    pub density_lr: f64,
    pub batch_size: usize,
    pub objective: Objective,
    pub freeze: FreezeMask,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            density_lr: 1e-2,
            batch_size: 16,
            objective: Objective::Reconstruction,
            freeze: FreezeMask::none(),
            seed: 0,
        }
    }
}

/// Batch means at one step; `loss == λ·distortion + rate` exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStep {
    pub loss: f64,
    pub distortion: f64,
    pub rate: f64,
}

/// Trains `model` (and `density`, for the rate–distortion objective) on
/// `data`. Batches are drawn from a reshuffled pass over the data; every
/// mask and noise draw derives from `opts.seed`.
pub fn train(
    model: &mut MaeModel,
    mut density: Option<&mut FactorizedDensity>,
    data: &[Tensor],
    opts: &TrainOptions,
) -> Result<Vec<TrainStep>> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let lambda = match opts.objective {
        Objective::Reconstruction => None,
        Objective::RateDistortion { lambda } => {
            if density.is_none() {
                return Err(Error::Config("rate-distortion training needs a density".into()));
            }
            if !(lambda >= 0.0) {
                return Err(Error::Config(format!("lambda {lambda} must be non-negative")));
            }
            Some(lambda)
        }
    };
    if lambda.is_none() {
        density = None;
    }
    if let Some(d) = density.as_deref() {
        if d.channels() != model.config().embed_dim {
            return Err(Error::Dimension(format!(
                "density has {} channels, embedding has {}",
                d.channels(),
                model.config().embed_dim
            )));
        }
    }

    let mask = model.trainable_mask(&opts.freeze);
    let mut opt = Adam::new(model.num_params(), opts.lr);
    let dlen = density.as_deref().map_or(0, |d| d.params().len());
    let mut dopt = Adam::new(dlen, opts.density_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(opts.steps);
    let weight = 1.0 / opts.batch_size as f64;

    for step in 0..opts.steps {
        let mut grad = vec![0.0; model.num_params()];
        let mut dgrad = vec![0.0; dlen];
        let (mut dsum, mut rsum) = (0.0, 0.0);
        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let x = &data[order[cursor]];
            cursor += 1;
            let image_seed: u64 = rng.random();
            let dens = density.as_deref();
            let parts = model.loss_and_grad(
                x,
                dens,
                lambda.unwrap_or(0.0),
                image_seed,
                weight,
                Some(&mut grad),
                dens.map(|_| dgrad.as_mut_slice()),
            )?;
            dsum += parts.distortion;
            rsum += parts.rate;
        }
        let distortion = dsum * weight;
        let rate = rsum * weight;
        let loss = match lambda {
            Some(l) => l * distortion + rate,
            None => distortion,
        };
        if !loss.is_finite() || grad.iter().chain(&dgrad).any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                reason: format!("loss {loss} or its gradient is not finite"),
            });
        }
        trace.push(TrainStep { loss, distortion, rate });
        opt.step(model.params_mut(), &grad, Some(&mask));
        if let Some(d) = density.as_deref_mut() {
            if opts.density_lr > 0.0 {
                dopt.step(d.params_mut(), &dgrad, None);
            }
        }
    }
    Ok(trace)
}
