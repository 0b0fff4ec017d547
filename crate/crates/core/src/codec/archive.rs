//! Self-describing container for one compressed sample.
//!
//! All integers are little-endian. See `docs/format.md` for a worked example.
//!
//! ```text
//! 4E 45 43 41      magic "NECA"
//! u8               version (1)
//! u8               mode: 0 = NEC, 1 = UQE, 2 = RDC
//! u16              channels e
//! u32              tokens n
//! u8               precision bits (NEC), else 0
//! ...              mode block
//! u64              payload length
//! [u8]             payload
//! u32              CRC-32 of every preceding byte
//! ```
//!
//! NEC block: `e × (i32 min, i32 max)`, then u8 table source. Source 0 is
//! followed by a u64 model id naming an out-of-band density; source 1 by
//! `(max − min + 2)` u32 frequencies per channel.
//!
//! UQE block: u8 bits (2–8, or 16/32 for float storage), u8 granularity
//! (0 per-tensor, 1 per-channel, 2 constant), then `count × (f64 scale,
//! i32 zero point, f64 min)` where count is 1, e, 1, or 0 for float storage.
//!
//! RDC block: u8 bit depth, u8 rank, `rank × u32` dims of the original input.

use sha2::{Digest, Sha256};

use crate::entropy::{encode_density, ChannelTable, FactorizedDensity, PmfTable};
use crate::error::{Error, Result};
use crate::quantizer::AffineQuantParams;

pub const ARCHIVE_MAGIC: [u8; 4] = *b"NECA";
pub const ARCHIVE_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Nec = 0,
    Uqe = 1,
    Rdc = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TableSource {
    /// Tables are rebuilt by the receiver from the density with this id.
    Referenced(u64),
    Embedded(PmfTable),
}

#[derive(Clone, Debug, PartialEq)]
pub enum UqeStorage {
    PerTensor(AffineQuantParams),
    PerChannel(Vec<AffineQuantParams>),
    /// Every value equals `value`; the payload is empty.
    Constant {
        bits: u8,
        value: f64,
    },
    Float16,
    Float32,
}

impl UqeStorage {
    pub fn bits(&self) -> u8 {
        match self {
            UqeStorage::PerTensor(p) => p.bits,
            UqeStorage::PerChannel(ps) => ps.first().map_or(0, |p| p.bits),
            UqeStorage::Constant { bits, .. } => *bits,
            UqeStorage::Float16 => 16,
            UqeStorage::Float32 => 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModeHeader {
    Nec {
        ranges: Vec<(i32, i32)>,
        tables: TableSource,
    },
    Uqe(UqeStorage),
    Rdc {
        bit_depth: u8,
        shape: Vec<u32>,
    },
}

impl ModeHeader {
    pub fn mode(&self) -> Mode {
        match self {
            ModeHeader::Nec { .. } => Mode::Nec,
            ModeHeader::Uqe(_) => Mode::Uqe,
            ModeHeader::Rdc { .. } => Mode::Rdc,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub channels: u16,
    pub tokens: u32,
    pub precision_bits: u8,
    pub header: ModeHeader,
    pub payload: Vec<u8>,
}

/// Identifier for a density blob: the first 8 bytes of its SHA-256, as LE u64.
pub fn model_id(density: &FactorizedDensity) -> u64 {
    let digest = Sha256::digest(encode_density(density));
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl Archive {
    fn validate(&self) -> Result<()> {
        match &self.header {
            ModeHeader::Nec { ranges, tables } => {
                if ranges.len() != self.channels as usize {
                    return Err(Error::format("ranges", "one range per channel required"));
                }
                if let TableSource::Embedded(t) = tables {
                    if t.ranges() != *ranges {
                        return Err(Error::format("tables", "embedded tables disagree with ranges"));
                    }
                    if t.precision_bits != self.precision_bits {
                        return Err(Error::format("precision", "tables use a different precision"));
                    }
                }
            }
            ModeHeader::Uqe(UqeStorage::PerChannel(ps)) => {
                if ps.len() != self.channels as usize {
                    return Err(Error::format("uqe params", "one parameter set per channel required"));
                }
            }
            ModeHeader::Uqe(_) => {}
            ModeHeader::Rdc { bit_depth, shape } => {
                if *bit_depth != 8 && *bit_depth != 16 {
                    return Err(Error::format("bit depth", format!("{bit_depth} is not 8 or 16")));
                }
                if shape.len() > 255 {
                    return Err(Error::format("shape", "rank exceeds 255"));
                }
            }
        }
        Ok(())
    }

    /// Number of bytes before the payload.
    pub fn header_len(&self) -> usize {
        self.pack_header().len()
    }

    fn pack_header(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&ARCHIVE_MAGIC);
        out.push(ARCHIVE_VERSION);
        out.push(self.header.mode() as u8);
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.tokens.to_le_bytes());
        out.push(self.precision_bits);
        match &self.header {
            ModeHeader::Nec { ranges, tables } => {
                for &(lo, hi) in ranges {
                    out.extend_from_slice(&lo.to_le_bytes());
                    out.extend_from_slice(&hi.to_le_bytes());
                }
                match tables {
                    TableSource::Referenced(id) => {
                        out.push(0);
                        out.extend_from_slice(&id.to_le_bytes());
                    }
                    TableSource::Embedded(t) => {
                        out.push(1);
                        for ch in &t.channels {
                            for &f in ch.freqs() {
                                out.extend_from_slice(&f.to_le_bytes());
                            }
                        }
                    }
                }
            }
            ModeHeader::Uqe(storage) => {
                out.push(storage.bits());
                let (gran, params): (u8, Vec<(f64, i32, f64)>) = match storage {
                    UqeStorage::PerTensor(p) => (0, vec![(p.scale, p.zero_point, p.min)]),
                    UqeStorage::PerChannel(ps) => (1, ps.iter().map(|p| (p.scale, p.zero_point, p.min)).collect()),
                    UqeStorage::Constant { value, .. } => (2, vec![(0.0, 0, *value)]),
                    UqeStorage::Float16 | UqeStorage::Float32 => (0, vec![]),
                };
                out.push(gran);
                for (scale, zp, min) in params {
                    out.extend_from_slice(&scale.to_le_bytes());
                    out.extend_from_slice(&zp.to_le_bytes());
                    out.extend_from_slice(&min.to_le_bytes());
                }
            }
            ModeHeader::Rdc { bit_depth, shape } => {
                out.push(*bit_depth);
                out.push(shape.len() as u8);
                for &d in shape {
                    out.extend_from_slice(&d.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out
    }

    pub fn pack(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = self.pack_header();
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn unpack(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != ARCHIVE_MAGIC {
            return Err(Error::format("magic", "not an archive"));
        }
        let version = r.u8("version")?;
        if version != ARCHIVE_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let mode = r.u8("mode")?;
        let channels = u16::from_le_bytes(r.array("channels")?);
        let tokens = u32::from_le_bytes(r.array("tokens")?);
        let precision_bits = r.u8("precision")?;
        let header = match mode {
            0 => {
                let mut ranges = Vec::with_capacity(channels as usize);
                for _ in 0..channels {
                    let lo = i32::from_le_bytes(r.array("ranges")?);
                    let hi = i32::from_le_bytes(r.array("ranges")?);
                    if lo > hi {
                        return Err(Error::format("ranges", format!("min {lo} > max {hi}")));
                    }
                    ranges.push((lo, hi));
                }
                let tables = match r.u8("table source")? {
                    0 => TableSource::Referenced(u64::from_le_bytes(r.array("model id")?)),
                    1 => {
                        let mut chans = Vec::with_capacity(ranges.len());
                        for &(lo, hi) in &ranges {
                            let slots = (hi as i64 - lo as i64 + 2) as usize;
                            let raw = r.take(slots.saturating_mul(4), "tables")?;
                            let freqs = raw
                                .chunks_exact(4)
                                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                                .collect();
                            chans.push(
                                ChannelTable::new(lo, hi, freqs).map_err(|e| Error::format("tables", e.to_string()))?,
                            );
                        }
                        TableSource::Embedded(
                            PmfTable::new(precision_bits, chans).map_err(|e| Error::format("tables", e.to_string()))?,
                        )
                    }
                    other => return Err(Error::format("table source", format!("unknown source {other}"))),
                };
                ModeHeader::Nec { ranges, tables }
            }
            1 => {
                let bits = r.u8("bits")?;
                let gran = r.u8("granularity")?;
                let read_param = |r: &mut Reader| -> Result<AffineQuantParams> {
                    Ok(AffineQuantParams {
                        bits,
                        scale: f64::from_le_bytes(r.array("scale")?),
                        zero_point: i32::from_le_bytes(r.array("zero point")?),
                        min: f64::from_le_bytes(r.array("min")?),
                    })
                };
                let storage = match (bits, gran) {
                    (16, 0) => UqeStorage::Float16,
                    (32, 0) => UqeStorage::Float32,
                    (2..=8, 0) => UqeStorage::PerTensor(read_param(&mut r)?),
                    (2..=8, 1) => {
                        UqeStorage::PerChannel((0..channels).map(|_| read_param(&mut r)).collect::<Result<_>>()?)
                    }
                    (2..=8, 2) => UqeStorage::Constant {
                        bits,
                        value: read_param(&mut r)?.min,
                    },
                    _ => return Err(Error::format("bits", format!("bits {bits} with granularity {gran}"))),
                };
                ModeHeader::Uqe(storage)
            }
            2 => {
                let bit_depth = r.u8("bit depth")?;
                let rank = r.u8("rank")?;
                let shape = (0..rank)
                    .map(|_| r.array("shape").map(u32::from_le_bytes))
                    .collect::<Result<_>>()?;
                ModeHeader::Rdc { bit_depth, shape }
            }
            other => return Err(Error::format("mode", format!("unknown mode {other}"))),
        };
        let payload_len = u64::from_le_bytes(r.array("payload length")?);
        if payload_len > (bytes.len() - r.pos) as u64 {
            return Err(Error::format("payload length", "exceeds archive size"));
        }
        let payload = r.take(payload_len as usize, "payload")?.to_vec();
        let body_end = r.pos;
        let crc = u32::from_le_bytes(r.array("checksum")?);
        if r.pos != bytes.len() {
            return Err(Error::format("payload length", "trailing bytes after checksum"));
        }
        if crc32fast::hash(&bytes[..body_end]) != crc {
            return Err(Error::format("checksum", "CRC-32 mismatch"));
        }
        let archive = Archive {
            channels,
            tokens,
            precision_bits,
            header,
            payload,
        };
        archive.validate()?;
        Ok(archive)
    }
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

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().unwrap())
    }
}
