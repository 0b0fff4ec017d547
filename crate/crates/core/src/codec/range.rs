//! Range coder with a 64-bit range register and 32-bit word renormalisation.
//!
//! The encoder keeps `low` in a `u128` so a carry out of bit 63 can be
//! propagated into words that were already produced; pending words are held
//! back (the `cache` scheme familiar from LZMA) until the carry is resolved.
//! All state is integer, so output is identical on every platform.

use crate::entropy::PmfTable;
use crate::error::{Error, Result};
use crate::quantizer::QuantizedEmbedding;

const TOP: u64 = 1 << 32;
const WORD_MASK: u128 = 0xFFFF_FFFF;

pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: u32,
    pending: u64,
    first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u64::MAX,
            cache: 0,
            pending: 1,
            first: true,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `total`.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum as u64 + freq as u64 <= total as u64);
        let r = self.range / total as u64;
        self.low += (r * cum as u64) as u128;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 32;
            self.shift_low();
        }
    }

    /// Writes `bits` (≤ 16) raw bits with a flat distribution.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 16 && value < (1 << bits));
        self.encode(value, 1, 1 << bits);
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> 64) as u32;
        let top_word = ((self.low >> 32) & WORD_MASK) as u32;
        if top_word != u32::MAX || carry != 0 {
            let mut word = self.cache.wrapping_add(carry);
            for _ in 0..self.pending {
                self.emit(word);
                word = u32::MAX.wrapping_add(carry);
            }
            self.pending = 0;
            self.cache = top_word;
        }
        self.pending += 1;
        self.low = (self.low & WORD_MASK) << 32;
    }

    fn emit(&mut self, word: u32) {
        // The very first word is always zero: nothing can carry into it.
        if self.first {
            self.first = false;
            return;
        }
        self.out.extend_from_slice(&word.to_be_bytes());
    }

    /// Flushes the coder.
    ///
    /// `range ≥ 2³²` always holds here, so rounding `low` up to a multiple of
    /// 2³² stays inside the final interval. The value's low word is then zero
    /// and is not written; the decoder reads it as padding.
    pub fn finish(mut self) -> Vec<u8> {
        self.low = (self.low + WORD_MASK) & !WORD_MASK;
        self.shift_low();
        // the window's top word is now zero, so this releases every pending word
        self.shift_low();
        self.out
    }
}

pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
    overrun: usize,
}

/// How many words past the end of input the decoder will read as zero.
const MAX_OVERRUN_WORDS: usize = 1;

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        if !input.len().is_multiple_of(4) {
            return Err(Error::Corruption(format!(
                "range-coded payload length {} is not a multiple of 4",
                input.len()
            )));
        }
        let mut d = Self {
            input,
            pos: 0,
            code: 0,
            range: u64::MAX,
            overrun: 0,
        };
        d.code = ((d.next_word()? as u64) << 32) | d.next_word()? as u64;
        Ok(d)
    }

    fn next_word(&mut self) -> Result<u32> {
        if self.pos + 4 <= self.input.len() {
            let w = u32::from_be_bytes(self.input[self.pos..self.pos + 4].try_into().unwrap());
            self.pos += 4;
            Ok(w)
        } else {
            self.overrun += 1;
            if self.overrun > MAX_OVERRUN_WORDS {
                return Err(Error::Corruption("range-coded payload truncated".into()));
            }
            Ok(0)
        }
    }

    /// Target value in `[0, total)` locating the next symbol; follow with
    /// [`consume`](Self::consume).
    pub fn peek(&mut self, total: u32) -> Result<(u32, u64)> {
        let r = self.range / total as u64;
        let v = self.code / r;
        if v >= total as u64 {
            return Err(Error::Corruption("range decoder left the coded interval".into()));
        }
        Ok((v as u32, r))
    }

    pub fn consume(&mut self, r: u64, cum: u32, freq: u32) -> Result<()> {
        self.code -= r * cum as u64;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.code = (self.code << 32) | self.next_word()? as u64;
            self.range <<= 32;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        let (v, r) = self.peek(1 << bits)?;
        self.consume(r, v, 1)?;
        Ok(v)
    }

    /// Checks the stream was consumed exactly: every word read, plus the one
    /// elided zero word.
    pub fn finish(&self) -> Result<()> {
        let unread = (self.input.len() - self.pos) / 4;
        if unread > 0 || self.overrun != MAX_OVERRUN_WORDS {
            return Err(Error::Corruption(format!(
                "stream length mismatch: {unread} unread words, {} padded",
                self.overrun
            )));
        }
        Ok(())
    }
}

/// Range-codes an `e×n` symbol grid, channel-major, against per-channel
/// tables. Symbols outside a table's range are coded as the escape slot
/// followed by their raw 32-bit two's-complement value.
pub fn range_encode(q: &QuantizedEmbedding, tables: &PmfTable) -> Result<Vec<u8>> {
    if tables.channels.len() != q.channels() {
        return Err(Error::Dimension(format!(
            "tables cover {} channels, embedding has {}",
            tables.channels.len(),
            q.channels()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (c, table) in tables.channels.iter().enumerate() {
        let total = table.total();
        for t in 0..q.tokens() {
            let s = q.get(c, t);
            match table.slot(s) {
                Some(slot) => enc.encode(table.cum(slot), table.freqs()[slot], total),
                None => {
                    let esc = table.escape_index();
                    enc.encode(table.cum(esc), table.freqs()[esc], total);
                    let raw = i32::try_from(s).map_err(|_| Error::Range(format!("symbol {s} exceeds 32 bits")))? as u32;
                    enc.encode_bits(raw >> 16, 16);
                    enc.encode_bits(raw & 0xFFFF, 16);
                }
            }
        }
    }
    Ok(enc.finish())
}

/// Inverse of [`range_encode`]. Decoding with tables other than the ones used
/// to encode is not detected here; archives carry a checksum for that.
pub fn range_decode(payload: &[u8], tables: &PmfTable, channels: usize, tokens: usize) -> Result<QuantizedEmbedding> {
    if tables.channels.len() != channels {
        return Err(Error::Dimension(format!(
            "tables cover {} channels, expected {channels}",
            tables.channels.len()
        )));
    }
    let mut dec = RangeDecoder::new(payload)?;
    let mut symbols = Vec::with_capacity(channels * tokens);
    for table in &tables.channels {
        let total = table.total();
        for _ in 0..tokens {
            let (v, r) = dec.peek(total)?;
            let slot = table.find(v);
            dec.consume(r, table.cum(slot), table.freqs()[slot])?;
            if slot == table.escape_index() {
                let hi = dec.decode_bits(16)?;
                let lo = dec.decode_bits(16)?;
                symbols.push(((hi << 16) | lo) as i32 as i64);
            } else {
                symbols.push(table.symbol_min as i64 + slot as i64);
            }
        }
    }
    dec.finish()?;
    QuantizedEmbedding::new(channels, tokens, symbols)
}
