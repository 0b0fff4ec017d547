//! Generic lossless byte compression used by the baselines.
//!
//! [`AdaptiveOrder0`] is the built-in coder: an order-0 adaptive model over
//! byte values driving the range coder. Anything implementing
//! [`ByteCompressor`] (a Zstandard binding, say) can be plugged in instead.

use super::range::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};

pub trait ByteCompressor: Send + Sync {
    fn name(&self) -> &str;
    fn compress(&self, data: &[u8]) -> Vec<u8>;
    fn decompress(&self, data: &[u8]) -> Result<Vec<u8>>;
}

/// Order-0 adaptive arithmetic coder over bytes.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveOrder0 {
    pub increment: u32,
    pub limit: u32,
}

impl Default for AdaptiveOrder0 {
    fn default() -> Self {
        Self {
            increment: 24,
            limit: 1 << 16,
        }
    }
}

struct Model {
    freq: [u32; 256],
    total: u32,
    increment: u32,
    limit: u32,
}

impl Model {
    fn new(cfg: &AdaptiveOrder0) -> Self {
        Self {
            freq: [1; 256],
            total: 256,
            increment: cfg.increment,
            limit: cfg.limit,
        }
    }

    fn cum(&self, sym: usize) -> u32 {
        self.freq[..sym].iter().sum()
    }

    fn find(&self, target: u32) -> (usize, u32) {
        let mut cum = 0;
        for (s, &f) in self.freq.iter().enumerate() {
            if target < cum + f {
                return (s, cum);
            }
            cum += f;
        }
        unreachable!("target below total")
    }

    fn update(&mut self, sym: usize) {
        self.freq[sym] += self.increment;
        self.total += self.increment;
        if self.total > self.limit {
            self.total = 0;
            for f in &mut self.freq {
                *f = (*f).div_ceil(2);
                self.total += *f;
            }
        }
    }
}

fn write_varint(mut v: u64, out: &mut Vec<u8>) {
    loop {
        let byte = (v & 0x7F) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn read_varint(data: &[u8]) -> Result<(u64, usize)> {
    let mut v = 0u64;
    for (i, &b) in data.iter().enumerate().take(10) {
        v |= ((b & 0x7F) as u64) << (7 * i);
        if b & 0x80 == 0 {
            return Ok((v, i + 1));
        }
    }
    Err(Error::Corruption("bad length prefix".into()))
}

impl ByteCompressor for AdaptiveOrder0 {
    fn name(&self) -> &str {
        "adaptive-order0"
    }

    fn compress(&self, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        write_varint(data.len() as u64, &mut out);
        if data.is_empty() {
            return out;
        }
        let mut model = Model::new(self);
        let mut enc = RangeEncoder::new();
        for &b in data {
            let s = b as usize;
            enc.encode(model.cum(s), model.freq[s], model.total);
            model.update(s);
        }
        out.extend(enc.finish());
        out
    }

    fn decompress(&self, data: &[u8]) -> Result<Vec<u8>> {
        let (len, used) = read_varint(data)?;
        let body = &data[used..];
        if len == 0 {
            if !body.is_empty() {
                return Err(Error::Corruption("trailing bytes after empty stream".into()));
            }
            return Ok(Vec::new());
        }
        // every byte costs at least a few bits, so this bounds allocation
        if len > (body.len() as u64 + 1) * 8 * 1024 {
            return Err(Error::Corruption(format!("implausible length {len}")));
        }
        let mut model = Model::new(self);
        let mut dec = RangeDecoder::new(body)?;
        let mut out = Vec::with_capacity(len as usize);
        for _ in 0..len {
            let (v, r) = dec.peek(model.total)?;
            let (s, cum) = model.find(v);
            dec.consume(r, cum, model.freq[s])?;
            out.push(s as u8);
            model.update(s);
        }
        dec.finish()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trips() {
        let c = AdaptiveOrder0::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [0usize, 1, 2, 17, 1000, 70_000] {
            let data: Vec<u8> = (0..len).map(|_| rng.random_range(0..8u8) * 31).collect();
            assert_eq!(c.decompress(&c.compress(&data)).unwrap(), data, "len {len}");
        }
    }

    #[test]
    fn zeros_compress_to_almost_nothing() {
        let c = AdaptiveOrder0::default();
        let data = vec![0u8; 1_000_000];
        let packed = c.compress(&data);
        assert!(packed.len() < 10_000, "{}", packed.len());
        assert_eq!(c.decompress(&packed).unwrap(), data);
    }

    #[test]
    fn random_bytes_do_not_shrink() {
        let c = AdaptiveOrder0::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<u8> = (0..200_000).map(|_| rng.random()).collect();
        let packed = c.compress(&data);
        assert!(packed.len() as f64 >= 0.99 * data.len() as f64, "{}", packed.len());
    }

    #[test]
    fn corrupt_streams_error() {
        let c = AdaptiveOrder0::default();
        let packed = c.compress(b"hello hello hello");
        assert!(c.decompress(&packed[..packed.len() - 4]).is_err());
        assert!(c.decompress(&[0xFF; 11]).is_err());
    }
}
