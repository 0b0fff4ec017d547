use super::FactorizedDensity;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Settings for standalone density fitting by gradient descent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    /// Gradient-norm clip threshold.
    pub clip_norm: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.2,
            clip_norm: 10.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    /// Mean bits per symbol at each step, before that step's update.
    pub loss: Vec<f64>,
}

impl FactorizedDensity {
    /// Fits the density to `samples` (each `e×n`) by minimising mean bits per
    /// symbol. Step `t` uses `samples[t % len]`. Values are taken as given, so
    /// integer grids fit the discrete bin probabilities directly.
    pub fn fit(&mut self, samples: &[Tensor], opts: FitOptions) -> Result<FitReport> {
        if opts.steps > 0 && samples.is_empty() {
            return Err(Error::Config("fit needs at least one sample".into()));
        }
        if !(opts.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", opts.lr)));
        }
        let mut report = FitReport::default();
        let mut grad = vec![0.0; self.params().len()];
        for step in 0..opts.steps {
            let y = &samples[step % samples.len()];
            let count = y.len().max(1) as f64;
            grad.fill(0.0);
            let bits = self.accumulate_rate(y, 1.0 / count, Some(&mut grad), None)?;
            let loss = bits / count;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss {loss}, gradient norm {norm}"),
                });
            }
            report.loss.push(loss);
            let scale = if norm > opts.clip_norm {
                opts.clip_norm / norm
            } else {
                1.0
            };
            for (p, g) in self.params_mut().iter_mut().zip(&grad) {
                *p -= opts.lr * scale * g;
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::DEFAULT_FILTERS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let mut m = FactorizedDensity::new(2, &DEFAULT_FILTERS, 10.0, 1).unwrap();
        let before = m.clone();
        let report = m
            .fit(
                &[],
                FitOptions {
                    steps: 0,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(report.loss.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn all_zero_data_collapses() {
        let mut m = FactorizedDensity::new(2, &DEFAULT_FILTERS, 10.0, 4).unwrap();
        let data = vec![Tensor::zeros(&[2, 256])];
        let report = m.fit(&data, FitOptions::default()).unwrap();
        let rate = m.rate_bits(&data[0]).unwrap() / 512.0;
        assert!(rate < 0.2, "rate {rate}, start {}", report.loss[0]);
    }

    #[test]
    fn loss_decreases_over_trailing_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = Normal::new(0.0, 3.0).unwrap();
        let data: Vec<f64> = (0..1024).map(|_| f64::round(normal.sample(&mut rng))).collect();
        let y = Tensor::new(vec![1, 1024], data).unwrap();
        let mut m = FactorizedDensity::new(1, &DEFAULT_FILTERS, 10.0, 2).unwrap();
        let report = m
            .fit(
                &[y],
                FitOptions {
                    steps: 600,
                    ..Default::default()
                },
            )
            .unwrap();
        let windows: Vec<f64> = report
            .loss
            .chunks(50)
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        for pair in windows.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{windows:?}");
        }
    }

    #[test]
    fn divergence_reports_step() {
        let mut m = FactorizedDensity::logistic(1).unwrap();
        let bad = Tensor::new(vec![1, 1], vec![f64::NAN]).unwrap();
        match m.fit(
            &[bad],
            FitOptions {
                steps: 3,
                ..Default::default()
            },
        ) {
            Err(Error::Training { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected training error, got {other:?}"),
        }
    }
}
