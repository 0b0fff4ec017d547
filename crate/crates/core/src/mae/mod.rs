//! A desk-scale masked autoencoder with an entropy bottleneck.
//!
//! Images are cut into patches, a random subset is kept, and a small
//! transformer encodes the kept patches plus a `[CLS]` token. A linear
//! bottleneck produces the embedding `y` (`e × n`, `[CLS]` in column 0). A
//! lighter transformer decoder reconstructs the full image from `y` and
//! learned mask tokens.

mod checkpoint;
pub mod data;
mod layers;
mod model;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC};
pub use model::{ForwardOutput, LossParts, MaeModel};
pub use train::{train, Objective, TrainOptions, TrainStep};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MaeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Embedding dimension `e`.
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    /// Hidden width of each MLP as a multiple of the block width.
    pub mlp_ratio: usize,
    /// Fraction of patches hidden from the encoder, in `[0, 1)`.
    pub mask_ratio: f64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            encoder_depth: 2,
            encoder_heads: 2,
            decoder_dim: 16,
            decoder_depth: 1,
            decoder_heads: 2,
            mlp_ratio: 2,
            mask_ratio: 0.75,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.channels) {
            return bad(format!("{} image channels, expected 1 to 3", self.channels));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        for (name, dim, heads) in [
            ("embed_dim", self.embed_dim, self.encoder_heads),
            ("decoder_dim", self.decoder_dim, self.decoder_heads),
        ] {
            // 2-D sin-cos position codes split the width four ways
            if dim == 0 || dim % 4 != 0 {
                return bad(format!("{name} {dim} must be a positive multiple of 4"));
            }
            if heads == 0 || dim % heads != 0 {
                return bad(format!("{name} {dim} not divisible by {heads} heads"));
            }
        }
        if self.decoder_depth == 0 {
            return bad("decoder needs at least one block".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        if self.kept_patches() == 0 {
            return bad(format!("mask ratio {} keeps no patches", self.mask_ratio));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn kept_patches(&self) -> usize {
        kept(self.num_patches(), self.mask_ratio)
    }

    /// Token count `n` of the embedding: kept patches plus `[CLS]`.
    pub fn tokens(&self) -> usize {
        self.kept_patches() + 1
    }
}

pub(crate) fn kept_count(config: &MaeConfig, ratio: f64) -> usize {
    kept(config.num_patches(), ratio)
}

pub(crate) fn kept(patches: usize, ratio: f64) -> usize {
    // tolerate representation error, e.g. 16 × (1 − 0.75)
    (patches as f64 * (1.0 - ratio) + 1e-9).floor() as usize
}

/// Parameter groups, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    EncoderPatchEmbed,
    EncoderBlocks,
    FinalEncoderLayer,
    DecoderPatchEmbed,
    FirstDecoderLayer,
    RemainingDecoder,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::EncoderPatchEmbed,
        Group::EncoderBlocks,
        Group::FinalEncoderLayer,
        Group::DecoderPatchEmbed,
        Group::FirstDecoderLayer,
        Group::RemainingDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::EncoderPatchEmbed => "encoder-patch-embed",
            Group::EncoderBlocks => "encoder-blocks",
            Group::FinalEncoderLayer => "final-encoder-layer",
            Group::DecoderPatchEmbed => "decoder-patch-embed",
            Group::FirstDecoderLayer => "first-decoder-layer",
            Group::RemainingDecoder => "remaining-decoder",
        }
    }
}

/// Which parameter groups stay fixed during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    frozen: [bool; 6],
}

impl FreezeMask {
    pub fn none() -> Self {
        Self { frozen: [false; 6] }
    }

    pub fn all() -> Self {
        Self { frozen: [true; 6] }
    }

    /// Everything frozen except both patch embeddings, the final encoder
    /// layer and the first decoder layer.
    pub fn partial() -> Self {
        let mut m = Self::all();
        for g in [
            Group::EncoderPatchEmbed,
            Group::FinalEncoderLayer,
            Group::DecoderPatchEmbed,
            Group::FirstDecoderLayer,
        ] {
            m.set(g, false);
        }
        m
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "partial" => Ok(Self::partial()),
            "none" => Ok(Self::none()),
            "all" => Ok(Self::all()),
            other => Err(Error::Config(format!("unknown freeze preset `{other}`"))),
        }
    }

    pub fn set(&mut self, group: Group, frozen: bool) {
        self.frozen[group as usize] = frozen;
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen[group as usize]
    }
}
