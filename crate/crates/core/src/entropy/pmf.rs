//! Integer frequency tables derived from a [`FactorizedDensity`].

use super::FactorizedDensity;
use crate::error::{Error, Result};
use crate::numerics::sigmoid;

/// Widest symbol range a single channel table may cover.
pub const MAX_RANGE_SYMBOLS: u64 = 1 << 20;

/// One channel's frequencies over `[symbol_min, symbol_max]` followed by an
/// escape slot for everything outside that range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelTable {
    pub symbol_min: i32,
    pub symbol_max: i32,
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl ChannelTable {
    pub fn new(symbol_min: i32, symbol_max: i32, freqs: Vec<u32>) -> Result<Self> {
        if symbol_min > symbol_max {
            return Err(Error::Range(format!("min {symbol_min} > max {symbol_max}")));
        }
        let width = (symbol_max as i64 - symbol_min as i64 + 1) as usize;
        if freqs.len() != width + 1 {
            return Err(Error::format(
                "frequencies",
                format!("{} entries for range of {width} symbols", freqs.len()),
            ));
        }
        if freqs.contains(&0) {
            return Err(Error::format("frequencies", "zero frequency"));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in &freqs {
            acc += f as u64;
            if acc > u32::MAX as u64 {
                return Err(Error::format("frequencies", "total overflows u32"));
            }
            cum.push(acc as u32);
        }
        Ok(Self {
            symbol_min,
            symbol_max,
            freqs,
            cum,
        })
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    pub fn total(&self) -> u32 {
        *self.cum.last().unwrap()
    }

    pub fn escape_index(&self) -> usize {
        self.freqs.len() - 1
    }

    /// Table slot for `symbol`, or `None` if it needs the escape path.
    pub fn slot(&self, symbol: i64) -> Option<usize> {
        if symbol < self.symbol_min as i64 || symbol > self.symbol_max as i64 {
            None
        } else {
            Some((symbol - self.symbol_min as i64) as usize)
        }
    }

    pub(crate) fn cum(&self, slot: usize) -> u32 {
        self.cum[slot]
    }

    /// Slot whose cumulative interval contains `target`.
    pub(crate) fn find(&self, target: u32) -> usize {
        // largest i with cum[i] <= target
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Probability the table assigns to `symbol` (escape mass if outside).
    pub fn probability(&self, symbol: i64) -> f64 {
        let slot = self.slot(symbol).unwrap_or(self.escape_index());
        self.freqs[slot] as f64 / self.total() as f64
    }
}

/// Per-channel coder tables at a fixed precision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PmfTable {
    pub precision_bits: u8,
    pub channels: Vec<ChannelTable>,
}

impl PmfTable {
    pub fn new(precision_bits: u8, channels: Vec<ChannelTable>) -> Result<Self> {
        if !(8..=16).contains(&precision_bits) {
            return Err(Error::Range(format!("precision {precision_bits} not in [8, 16]")));
        }
        let total = 1u32 << precision_bits;
        if let Some(c) = channels.iter().position(|t| t.total() != total) {
            return Err(Error::format(
                "frequencies",
                format!("channel {c} sums to {} instead of {total}", channels[c].total()),
            ));
        }
        Ok(Self {
            precision_bits,
            channels,
        })
    }

    pub fn ranges(&self) -> Vec<(i32, i32)> {
        self.channels.iter().map(|t| (t.symbol_min, t.symbol_max)).collect()
    }

    /// `Σ −log₂ p_table(s)` over an `e×n` grid of integer symbols, ignoring the
    /// raw bits that follow escapes.
    pub fn ideal_bits(&self, symbols: &[i64], tokens: usize) -> f64 {
        symbols
            .chunks(tokens.max(1))
            .zip(&self.channels)
            .map(|(row, t)| row.iter().map(|&s| -t.probability(s).log2()).sum::<f64>())
            .sum()
    }
}

/// Quantises the model's bin probabilities over each channel range into
/// frequencies summing to exactly `2^precision_bits`.
///
/// Every slot gets at least one count; the remaining counts follow the
/// largest-remainder method. The escape slot carries the tail mass outside the
/// range.
pub fn build_pmf_tables(model: &FactorizedDensity, ranges: &[(i32, i32)], precision_bits: u8) -> Result<PmfTable> {
    if !(8..=16).contains(&precision_bits) {
        return Err(Error::Range(format!("precision {precision_bits} not in [8, 16]")));
    }
    if ranges.len() != model.channels() {
        return Err(Error::Dimension(format!(
            "{} ranges for {} channels",
            ranges.len(),
            model.channels()
        )));
    }
    let total = 1u64 << precision_bits;
    let mut channels = Vec::with_capacity(ranges.len());
    for (c, &(lo, hi)) in ranges.iter().enumerate() {
        if lo > hi {
            return Err(Error::Range(format!("channel {c}: min {lo} > max {hi}")));
        }
        let width = (hi as i64 - lo as i64 + 1) as u64;
        if width > MAX_RANGE_SYMBOLS {
            return Err(Error::Range(format!(
                "channel {c}: range of {width} symbols exceeds {MAX_RANGE_SYMBOLS}"
            )));
        }
        if width + 1 > total {
            return Err(Error::Range(format!(
                "channel {c}: {} slots do not fit {precision_bits}-bit precision",
                width + 1
            )));
        }
        let mut probs: Vec<f64> = (lo..=hi).map(|s| model.bin_mass(c, s as f64)).collect();
        let below = sigmoid(model.logit(c, lo as f64 - 0.5)?);
        let above = sigmoid(-model.logit(c, hi as f64 + 0.5)?);
        probs.push(below + above);
        channels.push(ChannelTable::new(lo, hi, quantize_probs(&probs, total))?);
    }
    PmfTable::new(precision_bits, channels)
}

fn quantize_probs(probs: &[f64], total: u64) -> Vec<u32> {
    let mass: f64 = probs.iter().sum();
    let scaled: Vec<f64> = probs.iter().map(|&p| p / mass * total as f64).collect();
    let mut freqs: Vec<u64> = scaled.iter().map(|&q| (q.floor() as u64).max(1)).collect();
    let sum: u64 = freqs.iter().sum();
    // ties broken by slot index so the result is deterministic
    if sum < total {
        let mut order: Vec<usize> = (0..freqs.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = scaled[a] - scaled[a].floor();
            let rb = scaled[b] - scaled[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut missing = total - sum;
        for &i in order.iter().cycle() {
            if missing == 0 {
                break;
            }
            freqs[i] += 1;
            missing -= 1;
        }
    } else if sum > total {
        // flooring at 1 overshot; take from the largest slots
        let mut excess = sum - total;
        while excess > 0 {
            let i = (0..freqs.len())
                .max_by(|&a, &b| freqs[a].cmp(&freqs[b]).then(b.cmp(&a)))
                .unwrap();
            let take = excess.min(freqs[i] - 1);
            freqs[i] -= take;
            excess -= take;
        }
    }
    freqs.into_iter().map(|f| f as u32).collect()
}
