//! Model checkpoint blob.
//!
//! ```text
//! 4D 41 45 31   magic "MAE1"
//! u16 ×3        image_size, channels, patch_size
//! u16 ×4        embed_dim, encoder_depth, encoder_heads, decoder_dim
//! u16 ×3        decoder_depth, decoder_heads, mlp_ratio
//! f64           mask_ratio
//! u64           parameter count
//! f64 × count   parameters in layout order
//! ```
//!
//! All fields little-endian.

use super::{MaeConfig, MaeModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MAE1";

const HEADER_LEN: usize = 4 + 10 * 2 + 8 + 8;

fn config_fields(c: &MaeConfig) -> [usize; 10] {
    [
        c.image_size,
        c.channels,
        c.patch_size,
        c.embed_dim,
        c.encoder_depth,
        c.encoder_heads,
        c.decoder_dim,
        c.decoder_depth,
        c.decoder_heads,
        c.mlp_ratio,
    ]
}

pub fn encode_checkpoint(model: &MaeModel) -> Result<Vec<u8>> {
    let c = model.config();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.num_params());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    for v in config_fields(c) {
        let v = u16::try_from(v).map_err(|_| Error::Range(format!("config value {v} exceeds u16")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.mask_ratio.to_le_bytes());
    out.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MaeModel> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("header", "checkpoint truncated"));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", "not a model checkpoint"));
    }
    let mut f = [0usize; 10];
    for (i, v) in f.iter_mut().enumerate() {
        *v = u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
    }
    let config = MaeConfig {
        image_size: f[0],
        channels: f[1],
        patch_size: f[2],
        embed_dim: f[3],
        encoder_depth: f[4],
        encoder_heads: f[5],
        decoder_dim: f[6],
        decoder_depth: f[7],
        decoder_heads: f[8],
        mlp_ratio: f[9],
        mask_ratio: f64::from_le_bytes(bytes[24..32].try_into().unwrap()),
    };
    config.validate().map_err(|e| Error::format("config", e.to_string()))?;
    let count = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    if count.checked_mul(8) != Some(body.len() as u64) {
        return Err(Error::format(
            "parameters",
            format!("{count} parameters declared, {} bytes present", body.len()),
        ));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MaeModel::from_params(config, params).map_err(|e| Error::format("parameters", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = MaeModel::new(MaeConfig::default(), 3).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..4], &[0x4D, 0x41, 0x45, 0x31]);
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 21616);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), m);
    }

    #[test]
    fn rejects_damage() {
        let m = MaeModel::new(MaeConfig::default(), 3).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Format { field: "magic", .. })
        ));
        let mut bad = bytes;
        bad[4] = 15; // image size no longer divisible by the patch
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Format { field: "config", .. })
        ));
    }
}
