//! Binary serialisation of a [`FactorizedDensity`].
//!
//! ```text
//! 46 44 45 4E        magic "FDEN"
//! u8                 version (1)
//! u16 LE             channels e
//! u8                 layer count K
//! (K+1) × u8         filter widths, first and last are 1
//! e × P × f64 LE     parameters, channel-major
//! u8                 1 if symbol ranges follow, else 0
//! e × (i32, i32) LE  per-channel symbol min/max
//! ```

use super::FactorizedDensity;
use crate::error::{Error, Result};

pub const DENSITY_MAGIC: [u8; 4] = *b"FDEN";
pub const DENSITY_VERSION: u8 = 1;

pub fn encode_density(model: &FactorizedDensity) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * model.params().len());
    out.extend_from_slice(&DENSITY_MAGIC);
    out.push(DENSITY_VERSION);
    out.extend_from_slice(&(model.channels() as u16).to_le_bytes());
    out.push(model.num_layers() as u8);
    out.extend(model.widths().iter().map(|&w| w as u8));
    for &p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    match model.ranges() {
        Some(ranges) => {
            out.push(1);
            for &(lo, hi) in ranges {
                out.extend_from_slice(&lo.to_le_bytes());
                out.extend_from_slice(&hi.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(field, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn decode_density(bytes: &[u8]) -> Result<FactorizedDensity> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != DENSITY_MAGIC {
        return Err(Error::format("magic", "not a density blob"));
    }
    let version = r.take(1, "version")?[0];
    if version != DENSITY_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let channels = u16::from_le_bytes(r.take(2, "channels")?.try_into().unwrap()) as usize;
    let k = r.take(1, "layers")?[0] as usize;
    if k == 0 {
        return Err(Error::format("layers", "zero layers"));
    }
    let widths: Vec<usize> = r.take(k + 1, "widths")?.iter().map(|&w| w as usize).collect();
    let per_channel = super::layout_for(&widths).1;
    let count = channels * per_channel;
    let params: Vec<f64> = r
        .take(count * 8, "parameters")?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model =
        FactorizedDensity::from_parts(channels, widths, params).map_err(|e| Error::format("widths", e.to_string()))?;
    match r.take(1, "ranges flag")?[0] {
        0 => {}
        1 => {
            let raw = r.take(channels * 8, "ranges")?;
            let ranges = raw
                .chunks_exact(8)
                .map(|c| {
                    (
                        i32::from_le_bytes(c[..4].try_into().unwrap()),
                        i32::from_le_bytes(c[4..].try_into().unwrap()),
                    )
                })
                .collect();
            model.set_ranges(ranges)?;
        }
        other => return Err(Error::format("ranges flag", format!("bad flag {other}"))),
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailer", "unexpected bytes after blob"));
    }
    Ok(model)
}
