//! Frozen-embedding probes: pooling over the token columns (the `[CLS]`
//! column is discarded) followed by a single linear layer trained with
//! cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mae::MaeModel;
use crate::numerics::{dot, Tensor};
use crate::optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    /// One learned latent query attending over the tokens.
    Attention,
}

impl Pooling {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "attention" | "attn" => Ok(Pooling::Attention),
            other => Err(Error::Config(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub pooling: Pooling,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Run the decoder patch embedding and first decoder block (trainable)
    /// before pooling.
    pub prefix: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::Mean,
            epochs: 60,
            lr: 1e-2,
            batch_size: 32,
            weight_decay: 0.05,
            prefix: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    /// Held-out accuracy.
    pub accuracy: f64,
    pub train_accuracy: f64,
}

/// Per-dimension standardisation fitted on training tokens.
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(samples: &[Vec<f64>], d: usize) -> Self {
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = 0usize;
        for s in samples {
            for row in s.chunks_exact(d) {
                for j in 0..d {
                    mean[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
                count += 1;
            }
        }
        let c = count.max(1) as f64;
        let inv_std = (0..d)
            .map(|j| {
                let m = mean[j] / c;
                let var = (sq[j] / c - m * m).max(0.0);
                if var > 1e-24 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        mean.iter_mut().for_each(|m| *m /= c);
        Self { mean, inv_std }
    }

    fn apply(&self, s: &mut [f64]) {
        let d = self.mean.len();
        for row in s.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) * self.inv_std[j];
            }
        }
    }
}

/// Token rows (`n × e`) of an `e × n` grid, `[CLS]` included.
fn token_rows(y: &Tensor) -> Result<Vec<f64>> {
    let (_, n) = y.dims2()?;
    if n < 2 {
        return Err(Error::Dimension("probe needs at least one token besides [CLS]".into()));
    }
    Ok(y.transpose()?.into_data())
}

struct Head {
    d: usize,
    k: usize,
    pooling: Pooling,
    /// `[query (d) | W (d×k) | b (k)]`
    params: Vec<f64>,
}

impl Head {
    fn new(d: usize, k: usize, pooling: Pooling) -> Self {
        Self {
            d,
            k,
            pooling,
            params: vec![0.0; d + d * k + k],
        }
    }

    fn pool(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let t = x.len() / d;
        let alpha = match self.pooling {
            Pooling::Mean => vec![1.0 / t as f64; t],
            Pooling::Attention => {
                let q = &self.params[..d];
                let scale = 1.0 / (d as f64).sqrt();
                let s: Vec<f64> = x.chunks_exact(d).map(|r| dot(r, q) * scale).collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            }
        };
        let mut f = vec![0.0; d];
        for (row, &a) in x.chunks_exact(d).zip(&alpha) {
            f.iter_mut().zip(row).for_each(|(o, v)| *o += a * v);
        }
        (f, alpha)
    }

    fn logits(&self, f: &[f64]) -> Vec<f64> {
        let (d, k) = (self.d, self.k);
        let w = &self.params[d..d + d * k];
        let b = &self.params[d + d * k..];
        (0..k)
            .map(|c| b[c] + (0..d).map(|j| f[j] * w[j * k + c]).sum::<f64>())
            .collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(&self.pool(x).0))
    }

    /// Cross-entropy gradient for one sample; returns `∂/∂x`.
    fn backward(&self, x: &[f64], label: usize, weight: f64, g: &mut [f64]) -> Vec<f64> {
        let (d, k) = (self.d, self.k);
        let (f, alpha) = self.pool(x);
        let logits = self.logits(&f);
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let dl: Vec<f64> = e
            .iter()
            .enumerate()
            .map(|(c, v)| weight * (v / z - if c == label { 1.0 } else { 0.0 }))
            .collect();
        let w = &self.params[d..d + d * k];
        let mut df = vec![0.0; d];
        for j in 0..d {
            for c in 0..k {
                g[d + j * k + c] += f[j] * dl[c];
                df[j] += w[j * k + c] * dl[c];
            }
        }
        for c in 0..k {
            g[d + d * k + c] += dl[c];
        }
        let mut dx = vec![0.0; x.len()];
        for (drow, &a) in dx.chunks_exact_mut(d).zip(&alpha) {
            drow.iter_mut().zip(&df).for_each(|(o, v)| *o = a * v);
        }
        if self.pooling == Pooling::Attention {
            let q = &self.params[..d];
            let scale = 1.0 / (d as f64).sqrt();
            let da: Vec<f64> = x.chunks_exact(d).map(|r| dot(r, &df)).collect();
            let mean = dot(&da, &alpha);
            for (t, row) in x.chunks_exact(d).enumerate() {
                let ds = alpha[t] * (da[t] - mean) * scale;
                for j in 0..d {
                    g[j] += ds * row[j];
                    dx[t * d + j] += ds * q[j];
                }
            }
        }
        dx
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_labels(labels: &[usize], count: usize, what: &str) -> Result<()> {
    if labels.len() != count {
        return Err(Error::Dimension(format!(
            "{count} {what} samples but {} labels",
            labels.len()
        )));
    }
    Ok(())
}

/// Trains a probe on `train` grids (`e × n`, `[CLS]` in column 0) and
/// reports accuracy on `eval`.
///
/// With `cfg.prefix`, `model`'s decoder prefix is copied and fine-tuned with
/// the head; the model itself is never modified and its encoder is not
/// touched. Without it, token features are standardised using training-set
/// statistics.
pub fn train_probe(
    train: &[Tensor],
    train_labels: &[usize],
    eval: &[Tensor],
    eval_labels: &[usize],
    cfg: &ProbeConfig,
    model: Option<&MaeModel>,
) -> Result<ProbeResult> {
    check_labels(train_labels, train.len(), "training")?;
    check_labels(eval_labels, eval.len(), "evaluation")?;
    let k = train_labels
        .iter()
        .max()
        .map_or(0, |m| m + 1)
        .max(eval_labels.iter().max().map_or(0, |m| m + 1));
    let distinct = {
        let mut seen = vec![false; k];
        train_labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::DegenerateTask(format!(
            "training labels cover {distinct} class(es)"
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("probe batch size must be positive".into()));
    }
    let prefix = match (cfg.prefix, model) {
        (true, Some(m)) => Some(m),
        (true, None) => return Err(Error::Config("prefix probe needs the model".into())),
        (false, _) => None,
    };

    let e = train[0].dims2()?.0;
    let mut xs_train = train.iter().map(token_rows).collect::<Result<Vec<_>>>()?;
    let mut xs_eval = eval.iter().map(token_rows).collect::<Result<Vec<_>>>()?;
    for x in xs_train.iter().chain(&xs_eval) {
        if x.len() % e != 0 || (prefix.is_some() && x.len() / e != xs_train[0].len() / e) {
            return Err(Error::Dimension("probe inputs differ in shape".into()));
        }
    }

    let mut model_params = prefix.map(|m| m.params().to_vec());
    let kept: Vec<usize> = (0..xs_train[0].len() / e - 1).collect();
    if let Some(m) = prefix {
        if m.config().embed_dim != e || kept.len() != m.config().num_patches() {
            return Err(Error::Dimension(format!(
                "prefix expects {} channels and {} patch tokens",
                m.config().embed_dim,
                m.config().num_patches()
            )));
        }
    } else {
        // drop [CLS] and standardise
        for x in xs_train.iter_mut().chain(xs_eval.iter_mut()) {
            x.drain(..e);
        }
        let s = Standardizer::fit(&xs_train, e);
        xs_train.iter_mut().chain(xs_eval.iter_mut()).for_each(|x| s.apply(x));
    }
    let d = prefix.map_or(e, |m| m.config().decoder_dim);

    let features = |params: Option<&Vec<f64>>, x: &[f64]| match (prefix, params) {
        (Some(m), Some(p)) => {
            let (out, _) = m.prefix_forward(p, x, &kept);
            out[d..].to_vec()
        }
        _ => x.to_vec(),
    };

    let mut head = Head::new(d, k, cfg.pooling);
    let mut hopt = Adam::new(head.params.len(), cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut popt = model_params.as_ref().map(|p| Adam::new(p.len(), cfg.lr));
    let prefix_mask: Option<Vec<bool>> = prefix.map(|m| {
        let r = m.prefix_range();
        (0..m.num_params()).map(|i| r.contains(&i)).collect()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs_train.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let mut hg = vec![0.0; head.params.len()];
            let mut pg = model_params.as_ref().map(|p| vec![0.0; p.len()]);
            for &i in batch {
                match (prefix, model_params.as_ref(), pg.as_mut()) {
                    (Some(m), Some(p), Some(pg)) => {
                        let (out, cache) = m.prefix_forward(p, &xs_train[i], &kept);
                        let dtok = head.backward(&out[d..], train_labels[i], weight, &mut hg);
                        let mut dout = vec![0.0; out.len()];
                        dout[d..].copy_from_slice(&dtok);
                        m.prefix_backward(p, pg, &cache, &dout);
                    }
                    _ => {
                        head.backward(&xs_train[i], train_labels[i], weight, &mut hg);
                    }
                }
            }
            hopt.step(&mut head.params, &hg, None);
            if let (Some(p), Some(o), Some(g)) = (model_params.as_mut(), popt.as_mut(), pg) {
                o.step(p, &g, prefix_mask.as_deref());
            }
        }
    }

    let accuracy_on = |xs: &[Vec<f64>], labels: &[usize]| {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs
            .iter()
            .zip(labels)
            .filter(|(x, &l)| head.predict(&features(model_params.as_ref(), x)) == l)
            .count();
        hits as f64 / xs.len() as f64
    };
    Ok(ProbeResult {
        accuracy: accuracy_on(&xs_eval, eval_labels),
        train_accuracy: accuracy_on(&xs_train, train_labels),
    })
}
