//! The three quantisation paths: additive uniform noise during training,
//! integer rounding at inference, and affine uniform quantisation for the
//! quantised-embedding baseline.
//!
//! Ties round half away from zero everywhere (`f64::round`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `ỹ = y + u` with `u ~ U(−½, ½)` i.i.d., reproducible from `seed`.
pub fn add_uniform_noise(y: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = y.clone();
    for v in out.data_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    out
}

/// Integer symbol grid of shape `e×n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedEmbedding {
    channels: usize,
    tokens: usize,
    symbols: Vec<i64>,
}

impl QuantizedEmbedding {
    pub fn new(channels: usize, tokens: usize, symbols: Vec<i64>) -> Result<Self> {
        if channels * tokens != symbols.len() {
            return Err(Error::Dimension(format!(
                "{} symbols for a {channels}x{tokens} grid",
                symbols.len()
            )));
        }
        Ok(Self {
            channels,
            tokens,
            symbols,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn symbols(&self) -> &[i64] {
        &self.symbols
    }

    pub fn get(&self, channel: usize, token: usize) -> i64 {
        self.symbols[channel * self.tokens + token]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.tokens],
            self.symbols.iter().map(|&s| s as f64).collect(),
        )
        .expect("shape is consistent by construction")
    }
}

/// Rounds every entry of an `e×n` grid to the nearest integer.
pub fn round_quantize(y: &Tensor) -> Result<QuantizedEmbedding> {
    let (e, n) = y.dims2()?;
    let limit = (i32::MAX - 1) as f64;
    let symbols = y
        .data()
        .iter()
        .map(|&v| {
            if v.is_finite() && v.abs() < limit {
                Ok(v.round() as i64)
            } else {
                Err(Error::Range(format!("value {v} cannot be quantised to i32")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedEmbedding::new(e, n, symbols)
}

/// Per-tensor affine quantisation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineQuantParams {
    pub bits: u8,
    pub scale: f64,
    pub zero_point: i32,
    /// Tensor minimum, the value code 0 maps back to.
    pub min: f64,
}

impl AffineQuantParams {
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// `s = (max − min)/(2ᵇ − 1)`, `code = clamp(round((y − min)/s), 0, 2ᵇ − 1)`,
/// `z = round(−min/s)`.
pub fn affine_quantize(y: &Tensor, bits: u8) -> Result<(Vec<u32>, AffineQuantParams)> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Range(format!("affine bit width {bits} not in [2, 8]")));
    }
    if y.is_empty() || !y.is_finite() {
        return Err(Error::DegenerateInput("empty or non-finite tensor".into()));
    }
    let min = y.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = y.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Err(Error::DegenerateInput(format!("constant tensor with value {min}")));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let scale = (max - min) / levels;
    let zero_point = (-min / scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32;
    let codes = y
        .data()
        .iter()
        .map(|&v| ((v - min) / scale).round().clamp(0.0, levels) as u32)
        .collect();
    Ok((
        codes,
        AffineQuantParams {
            bits,
            scale,
            zero_point,
            min,
        },
    ))
}

/// `ŷ = code · s + min`.
pub fn affine_dequantize(codes: &[u32], params: &AffineQuantParams, shape: &[usize]) -> Result<Tensor> {
    let max_code = params.max_code();
    let data = codes
        .iter()
        .map(|&c| {
            if c > max_code {
                Err(Error::format("code", format!("{c} exceeds {max_code}")))
            } else {
                Ok(c as f64 * params.scale + params.min)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape.to_vec(), data)
}

/// Affine quantisation with one parameter set per row of an `e×n` grid.
pub fn affine_quantize_per_channel(y: &Tensor, bits: u8) -> Result<(Vec<u32>, Vec<AffineQuantParams>)> {
    let (e, n) = y.dims2()?;
    let mut codes = Vec::with_capacity(e * n);
    let mut params = Vec::with_capacity(e);
    for c in 0..e {
        let row = Tensor::new(vec![n], y.row(c).to_vec())?;
        let (cc, p) = affine_quantize(&row, bits)?;
        codes.extend(cc);
        params.push(p);
    }
    Ok((codes, params))
}
