//! Fully factorized entropy model.
//!
//! Every channel `c` of an `e×n` embedding gets its own monotone network
//! mapping a real `x` to a logit; the channel CDF is the sigmoid of that logit.
//! Layers alternate an affine map with positive weights and a gated `tanh`
//! residual:
//!
//! ```text
//! g    = softplus(H_k) · u + b_k
//! u'   = g + tanh(a_k) ⊙ tanh(g)        (inner layers)
//! u'   = g                              (last layer)
//! ```
//!
//! `tanh(a_k) ∈ (−1, 1)` keeps each gated layer strictly increasing, so the CDF
//! is monotone for any parameter values. The probability of an integer symbol
//! (or of a noisy real during training) is the CDF mass of the unit bin around
//! it.

mod blob;
mod fit;
mod pmf;

pub use blob::{decode_density, encode_density, DENSITY_MAGIC, DENSITY_VERSION};
pub use fit::{FitOptions, FitReport};
pub use pmf::{build_pmf_tables, ChannelTable, PmfTable, MAX_RANGE_SYMBOLS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, softplus_grad, softplus_inv, ParamGrad, Tensor};

/// Smallest probability assigned to any bin.
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;

/// Inner filter widths used when none are given.
pub const DEFAULT_FILTERS: [usize; 3] = [3, 3, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerLayout {
    rows: usize,
    cols: usize,
    h: usize,
    b: usize,
    a: Option<usize>,
}

/// Per-channel monotone CDF model `p(y) = ∏_c ∏_n p_c(y_{c,n})`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedDensity {
    channels: usize,
    widths: Vec<usize>,
    layers: Vec<LayerLayout>,
    per_channel: usize,
    params: Vec<f64>,
    ranges: Option<Vec<(i32, i32)>>,
}

fn layout_for(widths: &[usize]) -> (Vec<LayerLayout>, usize) {
    let k = widths.len() - 1;
    let mut off = 0;
    let mut layers = Vec::with_capacity(k);
    for i in 0..k {
        let (rows, cols) = (widths[i + 1], widths[i]);
        let h = off;
        off += rows * cols;
        let b = off;
        off += rows;
        let a = if i + 1 < k {
            let a = off;
            off += rows;
            Some(a)
        } else {
            None
        };
        layers.push(LayerLayout { rows, cols, h, b, a });
    }
    (layers, off)
}

impl FactorizedDensity {
    /// Fresh model with inner `filters` widths, initialised so every channel
    /// starts as a broad density of roughly `init_scale` spread.
    pub fn new(channels: usize, filters: &[usize], init_scale: f64, seed: u64) -> Result<Self> {
        if channels == 0 || channels > u16::MAX as usize {
            return Err(Error::Config(format!("channel count {channels} out of range")));
        }
        if filters.iter().any(|&f| f == 0 || f > u8::MAX as usize) || filters.len() + 1 > 255 {
            return Err(Error::Config(format!("bad filter widths {filters:?}")));
        }
        if !(init_scale > 0.0) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        let mut widths = vec![1];
        widths.extend_from_slice(filters);
        widths.push(1);
        let (layers, per_channel) = layout_for(&widths);
        let mut params = vec![0.0; channels * per_channel];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = init_scale.powf(1.0 / layers.len() as f64);
        for c in 0..channels {
            let block = &mut params[c * per_channel..(c + 1) * per_channel];
            for layer in &layers {
                let init = softplus_inv(1.0 / scale / layer.rows as f64);
                block[layer.h..layer.h + layer.rows * layer.cols].fill(init);
                for v in &mut block[layer.b..layer.b + layer.rows] {
                    *v = rng.random_range(-0.5..0.5);
                }
                // gate factors start at zero
            }
        }
        Ok(Self {
            channels,
            widths,
            layers,
            per_channel,
            params,
            ranges: None,
        })
    }

    /// Single-layer model whose every channel is the standard logistic
    /// distribution: `cdf(x) = sigmoid(x)`.
    pub fn logistic(channels: usize) -> Result<Self> {
        let widths = vec![1, 1];
        let (layers, per_channel) = layout_for(&widths);
        let mut params = vec![0.0; channels * per_channel];
        for c in 0..channels {
            params[c * per_channel + layers[0].h] = softplus_inv(1.0);
        }
        Self::from_parts(channels, widths, params)
    }

    pub fn from_parts(channels: usize, widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths[0] != 1 || *widths.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "widths must start and end with 1, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config("zero filter width".into()));
        }
        let (layers, per_channel) = layout_for(&widths);
        if params.len() != channels * per_channel {
            return Err(Error::Dimension(format!(
                "{} parameters for {channels} channels of {per_channel}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("density parameters not finite".into()));
        }
        Ok(Self {
            channels,
            widths,
            layers,
            per_channel,
            params,
            ranges: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Filter widths `(1, f₁, …, f_{K−1}, 1)`.
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params_per_channel(&self) -> usize {
        self.per_channel
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn channel_params(&self, channel: usize) -> &[f64] {
        &self.params[channel * self.per_channel..(channel + 1) * self.per_channel]
    }

    /// Per-channel symbol ranges recorded from training data, if any.
    pub fn ranges(&self) -> Option<&[(i32, i32)]> {
        self.ranges.as_deref()
    }

    pub fn set_ranges(&mut self, ranges: Vec<(i32, i32)>) -> Result<()> {
        if ranges.len() != self.channels {
            return Err(Error::Dimension(format!(
                "{} ranges for {} channels",
                ranges.len(),
                self.channels
            )));
        }
        if ranges.iter().any(|(lo, hi)| lo > hi) {
            return Err(Error::Range("range with min > max".into()));
        }
        self.ranges = Some(ranges);
        Ok(())
    }

    /// Records `[floor(min) − 2, ceil(max) + 2]` per channel from `e×n`
    /// sample grids.
    pub fn record_ranges<'a>(&mut self, samples: impl IntoIterator<Item = &'a Tensor>) -> Result<()> {
        let mut lo = vec![f64::INFINITY; self.channels];
        let mut hi = vec![f64::NEG_INFINITY; self.channels];
        for y in samples {
            let (e, n) = y.dims2()?;
            if e != self.channels {
                return Err(Error::Dimension(format!(
                    "sample has {e} channels, model has {}",
                    self.channels
                )));
            }
            for c in 0..e {
                for &v in &y.data()[c * n..(c + 1) * n] {
                    lo[c] = lo[c].min(v);
                    hi[c] = hi[c].max(v);
                }
            }
        }
        let ranges = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| {
                if !l.is_finite() || !h.is_finite() {
                    (-2, 2)
                } else {
                    let clamp = |v: f64| v.clamp(i32::MIN as f64 / 2.0, i32::MAX as f64 / 2.0) as i32;
                    (clamp(l.floor()) - 2, clamp(h.ceil()) + 2)
                }
            })
            .collect();
        self.set_ranges(ranges)
    }

    fn check_channel(&self, channel: usize) -> Result<()> {
        if channel >= self.channels {
            return Err(Error::Index {
                what: "density channel",
                index: channel,
                len: self.channels,
            });
        }
        Ok(())
    }

    fn channel_eval(&self, channel: usize) -> ChannelEval {
        ChannelEval::new(self, channel)
    }

    /// Logit of the CDF; `cdf = sigmoid(logit)`.
    pub fn logit(&self, channel: usize, x: f64) -> Result<f64> {
        self.check_channel(channel)?;
        Ok(self.channel_eval(channel).forward(x, &mut Scratch::new(&self.widths)))
    }

    pub fn cdf(&self, channel: usize, x: f64) -> Result<f64> {
        Ok(sigmoid(self.logit(channel, x)?))
    }

    /// Mass of the unit bin centred on `y`, floored at [`LIKELIHOOD_FLOOR`].
    pub fn likelihood(&self, channel: usize, y: f64) -> Result<f64> {
        self.check_channel(channel)?;
        let ev = self.channel_eval(channel);
        let mut scratch = Scratch::new(&self.widths);
        let up = ev.forward(y + 0.5, &mut scratch);
        let lo = ev.forward(y - 0.5, &mut scratch);
        Ok(bin_mass(lo, up).max(LIKELIHOOD_FLOOR))
    }

    /// Unfloored bin mass; used when building coder tables.
    pub(crate) fn bin_mass(&self, channel: usize, y: f64) -> f64 {
        let ev = self.channel_eval(channel);
        let mut scratch = Scratch::new(&self.widths);
        let up = ev.forward(y + 0.5, &mut scratch);
        let lo = ev.forward(y - 0.5, &mut scratch);
        bin_mass(lo, up)
    }

    fn check_grid(&self, y: &Tensor) -> Result<(usize, usize)> {
        let (e, n) = y.dims2()?;
        if e != self.channels {
            return Err(Error::Dimension(format!(
                "embedding has {e} channels, density has {}",
                self.channels
            )));
        }
        Ok((e, n))
    }

    /// `−Σ_{c,n} log₂ p_c(y_{c,n})` for an `e×n` grid.
    pub fn rate_bits(&self, y: &Tensor) -> Result<f64> {
        let (e, n) = self.check_grid(y)?;
        let mut scratch = Scratch::new(&self.widths);
        let mut bits = 0.0;
        for c in 0..e {
            let ev = self.channel_eval(c);
            for &v in &y.data()[c * n..(c + 1) * n] {
                let up = ev.forward(v + 0.5, &mut scratch);
                let lo = ev.forward(v - 0.5, &mut scratch);
                bits -= bin_mass(lo, up).max(LIKELIHOOD_FLOOR).log2();
            }
        }
        Ok(bits)
    }

    /// Analytic gradients of [`rate_bits`](Self::rate_bits) with respect to
    /// every density parameter and every entry of `y`.
    pub fn rate_gradients(&self, y: &Tensor) -> Result<RateGradients> {
        let mut dparams = vec![0.0; self.params.len()];
        let mut dy = vec![0.0; y.len()];
        let bits = self.accumulate_rate(y, 1.0, Some(&mut dparams), Some(&mut dy))?;
        let value = Tensor::new(vec![self.channels, self.per_channel], self.params.clone())?;
        let grad = Tensor::new(vec![self.channels, self.per_channel], dparams)?;
        Ok(RateGradients {
            bits,
            params: ParamGrad::new(value, grad)?,
            dy: Tensor::new(y.shape().to_vec(), dy)?,
        })
    }

    /// Adds `scale · ∂rate/∂θ` into `dparams` and `scale · ∂rate/∂y` into `dy`;
    /// returns the unscaled rate in bits.
    pub(crate) fn accumulate_rate(
        &self,
        y: &Tensor,
        scale: f64,
        mut dparams: Option<&mut [f64]>,
        mut dy: Option<&mut [f64]>,
    ) -> Result<f64> {
        let (e, n) = self.check_grid(y)?;
        if let Some(d) = dy.as_deref() {
            if d.len() != y.len() {
                return Err(Error::Dimension("dy buffer size".into()));
            }
        }
        let mut up_s = Scratch::new(&self.widths);
        let mut lo_s = Scratch::new(&self.widths);
        let mut acc = ChannelGrad::new(self);
        let mut bits = 0.0;
        for c in 0..e {
            let ev = self.channel_eval(c);
            acc.reset();
            for t in 0..n {
                let v = y.data()[c * n + t];
                let up = ev.forward(v + 0.5, &mut up_s);
                let lo = ev.forward(v - 0.5, &mut lo_s);
                let p = bin_mass(lo, up);
                let floored = p <= LIKELIHOOD_FLOOR;
                bits -= p.max(LIKELIHOOD_FLOOR).log2();
                if floored {
                    continue;
                }
                let dbits_dp = -scale / (p * std::f64::consts::LN_2);
                let d_up = dbits_dp * sigmoid_grad(up);
                let d_lo = -dbits_dp * sigmoid_grad(lo);
                let want_params = dparams.is_some();
                let dx =
                    ev.backward(&up_s, d_up, &mut acc, want_params) + ev.backward(&lo_s, d_lo, &mut acc, want_params);
                if let Some(d) = dy.as_deref_mut() {
                    d[c * n + t] += dx;
                }
            }
            if let Some(d) = dparams.as_deref_mut() {
                let block = &mut d[c * self.per_channel..(c + 1) * self.per_channel];
                acc.finish_into(self, c, block);
            }
        }
        Ok(bits)
    }
}

/// Output of [`FactorizedDensity::rate_gradients`].
#[derive(Clone, Debug)]
pub struct RateGradients {
    pub bits: f64,
    /// Density parameters as an `e × params_per_channel` grid with their grads.
    pub params: ParamGrad,
    pub dy: Tensor,
}

/// `cdf(up) − cdf(lo)` evaluated on the side of the distribution where the
/// sigmoids are small, which keeps tail probabilities accurate.
#[inline]
fn bin_mass(lo: f64, up: f64) -> f64 {
    if lo + up > 0.0 {
        sigmoid(-lo) - sigmoid(-up)
    } else {
        sigmoid(up) - sigmoid(lo)
    }
}

#[inline]
fn sigmoid_grad(z: f64) -> f64 {
    sigmoid(z) * sigmoid(-z)
}

/// Activations kept from one scalar forward pass.
struct Scratch {
    /// inputs to each layer; `u[0] = [x]`
    u: Vec<Vec<f64>>,
    /// pre-gate affine outputs
    g: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(widths: &[usize]) -> Self {
        let k = widths.len() - 1;
        Self {
            u: (0..k).map(|i| vec![0.0; widths[i]]).collect(),
            g: (0..k).map(|i| vec![0.0; widths[i + 1]]).collect(),
        }
    }
}

/// Transformed parameters of one channel, computed once per call.
struct ChannelEval {
    layers: Vec<LayerLayout>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    gates: Vec<Option<Vec<f64>>>,
}

impl ChannelEval {
    fn new(model: &FactorizedDensity, channel: usize) -> Self {
        let p = model.channel_params(channel);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut gates = Vec::new();
        for l in &model.layers {
            weights.push(p[l.h..l.h + l.rows * l.cols].iter().map(|&h| softplus(h)).collect());
            biases.push(p[l.b..l.b + l.rows].to_vec());
            gates.push(l.a.map(|a| p[a..a + l.rows].iter().map(|v| v.tanh()).collect()));
        }
        Self {
            layers: model.layers.clone(),
            weights,
            biases,
            gates,
        }
    }

    fn forward(&self, x: f64, s: &mut Scratch) -> f64 {
        s.u[0][0] = x;
        let k = self.layers.len();
        let mut out = 0.0;
        for i in 0..k {
            let l = &self.layers[i];
            let w = &self.weights[i];
            for r in 0..l.rows {
                let mut acc = self.biases[i][r];
                for c in 0..l.cols {
                    acc += w[r * l.cols + c] * s.u[i][c];
                }
                s.g[i][r] = acc;
            }
            if i + 1 < k {
                let gate = self.gates[i].as_ref().unwrap();
                for r in 0..l.rows {
                    let g = s.g[i][r];
                    s.u[i + 1][r] = g + gate[r] * g.tanh();
                }
            } else {
                out = s.g[i][0];
            }
        }
        out
    }

    /// Backpropagates `dlogit` through the activations in `s`; accumulates raw
    /// weight and gate gradients into `acc` and returns `∂/∂x`.
    fn backward(&self, s: &Scratch, dlogit: f64, acc: &mut ChannelGrad, want_params: bool) -> f64 {
        let k = self.layers.len();
        let mut du = std::mem::take(&mut acc.du_buf);
        let mut dg = std::mem::take(&mut acc.dg_buf);
        du.clear();
        du.push(dlogit);
        for i in (0..k).rev() {
            let l = &self.layers[i];
            dg.clear();
            if i + 1 < k {
                let gate = self.gates[i].as_ref().unwrap();
                for r in 0..l.rows {
                    let th = s.g[i][r].tanh();
                    dg.push(du[r] * (1.0 + gate[r] * (1.0 - th * th)));
                    if want_params {
                        acc.dgate[i][r] += du[r] * th;
                    }
                }
            } else {
                dg.extend_from_slice(&du[..l.rows]);
            }
            if want_params {
                for r in 0..l.rows {
                    acc.db[i][r] += dg[r];
                    for c in 0..l.cols {
                        acc.dw[i][r * l.cols + c] += dg[r] * s.u[i][c];
                    }
                }
            }
            du.clear();
            let w = &self.weights[i];
            for c in 0..l.cols {
                let mut v = 0.0;
                for r in 0..l.rows {
                    v += w[r * l.cols + c] * dg[r];
                }
                du.push(v);
            }
        }
        let dx = du[0];
        acc.du_buf = du;
        acc.dg_buf = dg;
        dx
    }
}

/// Gradient accumulator for one channel in the transformed parameterisation
/// (`softplus(H)` and `tanh(a)`), converted to raw parameters in
/// [`finish_into`](Self::finish_into).
struct ChannelGrad {
    dw: Vec<Vec<f64>>,
    db: Vec<Vec<f64>>,
    dgate: Vec<Vec<f64>>,
    du_buf: Vec<f64>,
    dg_buf: Vec<f64>,
}

impl ChannelGrad {
    fn new(model: &FactorizedDensity) -> Self {
        Self {
            dw: model.layers.iter().map(|l| vec![0.0; l.rows * l.cols]).collect(),
            db: model.layers.iter().map(|l| vec![0.0; l.rows]).collect(),
            dgate: model.layers.iter().map(|l| vec![0.0; l.rows]).collect(),
            du_buf: Vec::new(),
            dg_buf: Vec::new(),
        }
    }

    fn reset(&mut self) {
        for v in self.dw.iter_mut().chain(&mut self.db).chain(&mut self.dgate) {
            v.fill(0.0);
        }
    }

    fn finish_into(&self, model: &FactorizedDensity, channel: usize, out: &mut [f64]) {
        let p = model.channel_params(channel);
        for (i, l) in model.layers.iter().enumerate() {
            for j in 0..l.rows * l.cols {
                out[l.h + j] += self.dw[i][j] * softplus_grad(p[l.h + j]);
            }
            for r in 0..l.rows {
                out[l.b + r] += self.db[i][r];
            }
            if let Some(a) = l.a {
                for r in 0..l.rows {
                    let t = p[a + r].tanh();
                    out[a + r] += self.dgate[i][r] * (1.0 - t * t);
                }
            }
        }
    }
}
