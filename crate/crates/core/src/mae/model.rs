use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{Alloc, Block, BlockCache, LayerNorm, Linear, LnCache, Span};
use super::{kept, FreezeMask, Group, MaeConfig};
use crate::entropy::FactorizedDensity;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quantizer::add_uniform_noise;

/// Offsets of every weight inside the flat parameter vector. Groups occupy
/// contiguous ranges in [`Group::ALL`] order.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub pe: Linear,
    pub cls: Span,
    pub enc: Vec<Block>,
    pub ln_f: LayerNorm,
    pub bottleneck: Linear,
    pub de: Linear,
    pub mask_token: Span,
    pub dec: Vec<Block>,
    pub ln_d: LayerNorm,
    pub head: Linear,
    pub groups: [Range<usize>; 6],
    pub len: usize,
}

impl Layout {
    fn new(c: &MaeConfig) -> Self {
        let (e, dd, pd) = (c.embed_dim, c.decoder_dim, c.patch_dim());
        let mut a = Alloc::default();
        let mut mark = a.len;
        let mut groups: [Range<usize>; 6] = Default::default();
        let mut close = |a: &Alloc, g: Group, mark: &mut usize| {
            groups[g as usize] = *mark..a.len;
            *mark = a.len;
        };
        let pe = a.linear(pd, e, true);
        close(&a, Group::EncoderPatchEmbed, &mut mark);
        let cls = a.take(e);
        let enc = (0..c.encoder_depth)
            .map(|_| a.block(e, c.encoder_heads, e * c.mlp_ratio))
            .collect();
        close(&a, Group::EncoderBlocks, &mut mark);
        let ln_f = a.layer_norm(e);
        let bottleneck = a.linear(e, e, true);
        close(&a, Group::FinalEncoderLayer, &mut mark);
        let de = a.linear(e, dd, true);
        let mask_token = a.take(dd);
        close(&a, Group::DecoderPatchEmbed, &mut mark);
        let first = a.block(dd, c.decoder_heads, dd * c.mlp_ratio);
        close(&a, Group::FirstDecoderLayer, &mut mark);
        let mut dec = vec![first];
        dec.extend((1..c.decoder_depth).map(|_| a.block(dd, c.decoder_heads, dd * c.mlp_ratio)));
        let ln_d = a.layer_norm(dd);
        let head = a.linear(dd, pd, true);
        close(&a, Group::RemainingDecoder, &mut mark);
        Self {
            pe,
            cls,
            enc,
            ln_f,
            bottleneck,
            de,
            mask_token,
            dec,
            ln_d,
            head,
            groups,
            len: a.len,
        }
    }

    fn linears(&self) -> Vec<Linear> {
        let mut out = vec![self.pe, self.bottleneck, self.de, self.head];
        for b in self.enc.iter().chain(&self.dec) {
            out.extend([b.wq, b.wk, b.wv, b.wo, b.fc1, b.fc2]);
        }
        out
    }

    fn norms(&self) -> Vec<LayerNorm> {
        let mut out = vec![self.ln_f, self.ln_d];
        for b in self.enc.iter().chain(&self.dec) {
            out.extend([b.ln1, b.ln2]);
        }
        out
    }
}

/// 2-D sin-cos position codes, one `dim`-wide row per patch.
fn position_codes(grid: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = vec![0.0; grid * grid * dim];
    for r in 0..grid {
        for c in 0..grid {
            let row = &mut out[(r * grid + c) * dim..(r * grid + c + 1) * dim];
            for (axis, pos) in [(0, c as f64), (1, r as f64)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    row[axis * 2 * quarter + i] = (pos * omega).sin();
                    row[axis * 2 * quarter + quarter + i] = (pos * omega).cos();
                }
            }
        }
    }
    out
}

/// Result of [`MaeModel::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `e × n` embedding, `[CLS]` in column 0.
    pub y: Tensor,
    /// Full image predicted by the decoder, same shape as the input.
    pub reconstruction: Tensor,
    /// `true` for every patch hidden from the encoder.
    pub mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    /// Mean squared error over the masked patches (all patches when none are masked).
    pub distortion: f64,
    /// Bits under the density for the noisy embedding.
    pub rate: f64,
}

pub(crate) struct EncCache {
    kept_patches: Vec<f64>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    normed: Vec<f64>,
}

pub(crate) struct DecCache {
    input: Vec<f64>,
    seq_len: usize,
    blocks: Vec<BlockCache>,
    ln_d: LnCache,
    normed: Vec<f64>,
}

pub(crate) struct PrefixCache {
    input: Vec<f64>,
    block: BlockCache,
}

#[derive(Clone, Debug)]
pub struct MaeModel {
    config: MaeConfig,
    pub(crate) layout: Layout,
    params: Vec<f64>,
    pos_enc: Vec<f64>,
    pos_dec: Vec<f64>,
}

impl PartialEq for MaeModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

fn noise_seed(seed: u64) -> u64 {
    seed ^ 0x5DEE_CE66_D1CE_B00C
}

impl MaeModel {
    /// Xavier-uniform weights, zero biases, unit norm gains, and small
    /// normal `[CLS]`/mask tokens.
    pub fn new(config: MaeConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = model.layout.clone();
        let p = &mut model.params;
        for lin in layout.linears() {
            let bound = (6.0 / (lin.din + lin.dout) as f64).sqrt();
            for w in lin.w.of_mut(p) {
                *w = rng.random_range(-bound..bound);
            }
        }
        for ln in layout.norms() {
            ln.g.of_mut(p).fill(1.0);
        }
        let normal = Normal::new(0.0, 0.02).unwrap();
        for s in [layout.cls, layout.mask_token] {
            for v in s.of_mut(p) {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(model)
    }

    fn zeroed(config: MaeConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Self {
            pos_enc: position_codes(config.grid(), config.embed_dim),
            pos_dec: position_codes(config.grid(), config.decoder_dim),
            params: vec![0.0; layout.len],
            layout,
            config,
        })
    }

    pub fn from_params(config: MaeConfig, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        if params.len() != model.params.len() {
            return Err(Error::Dimension(format!(
                "{} parameters given, config needs {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &MaeConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn group_range(&self, group: Group) -> Range<usize> {
        self.layout.groups[group as usize].clone()
    }

    /// Per-parameter `true` where the parameter may be updated.
    pub fn trainable_mask(&self, freeze: &FreezeMask) -> Vec<bool> {
        let mut m = vec![false; self.params.len()];
        for g in Group::ALL {
            if !freeze.is_frozen(g) {
                m[self.group_range(g)].fill(true);
            }
        }
        m
    }

    /// `(trainable, total)` parameter counts under `freeze`.
    pub fn trainable_count(&self, freeze: &FreezeMask) -> (usize, usize) {
        let t = Group::ALL
            .iter()
            .filter(|&&g| !freeze.is_frozen(g))
            .map(|&g| self.group_range(g).len())
            .sum();
        (t, self.params.len())
    }

    pub fn trainable_fraction(&self, freeze: &FreezeMask) -> f64 {
        let (t, n) = self.trainable_count(freeze);
        t as f64 / n as f64
    }

    /// `P × patch_dim` rows, patches in raster order, each `(channel, row, col)`.
    pub fn patchify(&self, x: &Tensor) -> Result<Vec<f64>> {
        let c = &self.config;
        let want = [c.channels, c.image_size, c.image_size];
        if x.shape() != want {
            return Err(Error::Dimension(format!(
                "image shape {:?}, model expects {want:?}",
                x.shape()
            )));
        }
        let (g, ps, s) = (c.grid(), c.patch_size, c.image_size);
        let mut out = Vec::with_capacity(x.len());
        for pr in 0..g {
            for pc in 0..g {
                for ch in 0..c.channels {
                    for r in 0..ps {
                        let start = ch * s * s + (pr * ps + r) * s + pc * ps;
                        out.extend_from_slice(&x.data()[start..start + ps]);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn unpatchify(&self, patches: &[f64]) -> Result<Tensor> {
        let c = &self.config;
        let (g, ps, s) = (c.grid(), c.patch_size, c.image_size);
        let mut out = vec![0.0; c.channels * s * s];
        let mut it = patches.iter();
        for pr in 0..g {
            for pc in 0..g {
                for ch in 0..c.channels {
                    for r in 0..ps {
                        let start = ch * s * s + (pr * ps + r) * s + pc * ps;
                        for v in &mut out[start..start + ps] {
                            *v = *it.next().unwrap();
                        }
                    }
                }
            }
        }
        Tensor::new(vec![c.channels, s, s], out)
    }

    /// Sorted indices of the patches kept at `ratio`, sampled uniformly
    /// without replacement from `seed`.
    pub fn sample_kept(&self, ratio: f64, seed: u64) -> Result<Vec<usize>> {
        let total = self.config.num_patches();
        let k = kept(total, ratio);
        if !(0.0..1.0).contains(&ratio) || k == 0 {
            return Err(Error::Config(format!("mask ratio {ratio} keeps no patches")));
        }
        if k == total {
            return Ok((0..total).collect());
        }
        let mut idx: Vec<usize> = (0..total).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = idx[..k].to_vec();
        out.sort_unstable();
        Ok(out)
    }

    pub(crate) fn encode(&self, p: &[f64], patches: &[f64], kept: &[usize]) -> (Vec<f64>, EncCache) {
        let l = &self.layout;
        let (e, pd) = (self.config.embed_dim, self.config.patch_dim());
        let m = kept.len();
        let mut kept_patches = Vec::with_capacity(m * pd);
        for &i in kept {
            kept_patches.extend_from_slice(&patches[i * pd..(i + 1) * pd]);
        }
        let emb = l.pe.forward(p, &kept_patches, m);
        let mut h = Vec::with_capacity((m + 1) * e);
        h.extend_from_slice(l.cls.of(p));
        for (r, &i) in kept.iter().enumerate() {
            let pos = &self.pos_enc[i * e..(i + 1) * e];
            h.extend(emb[r * e..(r + 1) * e].iter().zip(pos).map(|(a, b)| a + b));
        }
        let mut blocks = Vec::with_capacity(l.enc.len());
        for b in &l.enc {
            let (out, c) = b.forward(p, &h, m + 1);
            blocks.push(c);
            h = out;
        }
        let (normed, ln_f) = l.ln_f.forward(p, &h);
        let yt = l.bottleneck.forward(p, &normed, m + 1);
        let cache = EncCache {
            kept_patches,
            blocks,
            ln_f,
            normed,
        };
        (yt, cache)
    }

    pub(crate) fn encode_backward(&self, p: &[f64], g: &mut [f64], c: &EncCache, dyt: &[f64]) {
        let l = &self.layout;
        let e = self.config.embed_dim;
        let t = dyt.len() / e;
        let dn = l.bottleneck.backward(p, g, &c.normed, dyt, t);
        let mut dh = l.ln_f.backward(p, g, &c.ln_f, &dn);
        for (b, bc) in l.enc.iter().zip(&c.blocks).rev() {
            dh = b.backward(p, g, bc, &dh);
        }
        l.cls.of_mut(g).iter_mut().zip(&dh[..e]).for_each(|(a, b)| *a += b);
        l.pe.backward(p, g, &c.kept_patches, &dh[e..], t - 1);
    }

    /// Full decoder: `(1 + P) × patch_dim` predictions, row 0 belongs to `[CLS]`.
    pub(crate) fn decode(&self, p: &[f64], yt: &[f64], kept: &[usize]) -> (Vec<f64>, DecCache) {
        let l = &self.layout;
        let dd = self.config.decoder_dim;
        let total = self.config.num_patches();
        let t = kept.len() + 1;
        let z = l.de.forward(p, yt, t);
        let mut seq = vec![0.0; (total + 1) * dd];
        seq[..dd].copy_from_slice(&z[..dd]);
        let mask_token = l.mask_token.of(p);
        for i in 0..total {
            let row = &mut seq[(i + 1) * dd..(i + 2) * dd];
            row.copy_from_slice(mask_token);
        }
        for (r, &i) in kept.iter().enumerate() {
            seq[(i + 1) * dd..(i + 2) * dd].copy_from_slice(&z[(r + 1) * dd..(r + 2) * dd]);
        }
        for i in 0..total {
            let pos = &self.pos_dec[i * dd..(i + 1) * dd];
            seq[(i + 1) * dd..(i + 2) * dd]
                .iter_mut()
                .zip(pos)
                .for_each(|(a, b)| *a += b);
        }
        let mut h = seq;
        let mut blocks = Vec::with_capacity(l.dec.len());
        for b in &l.dec {
            let (out, c) = b.forward(p, &h, total + 1);
            blocks.push(c);
            h = out;
        }
        let (normed, ln_d) = l.ln_d.forward(p, &h);
        let pred = l.head.forward(p, &normed, total + 1);
        let cache = DecCache {
            input: yt.to_vec(),
            seq_len: total + 1,
            blocks,
            ln_d,
            normed,
        };
        (pred, cache)
    }

    /// Returns `∂/∂yt`.
    pub(crate) fn decode_backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        c: &DecCache,
        kept: &[usize],
        dpred: &[f64],
    ) -> Vec<f64> {
        let l = &self.layout;
        let dd = self.config.decoder_dim;
        let dn = l.head.backward(p, g, &c.normed, dpred, c.seq_len);
        let mut dh = l.ln_d.backward(p, g, &c.ln_d, &dn);
        for (b, bc) in l.dec.iter().zip(&c.blocks).rev() {
            dh = b.backward(p, g, bc, &dh);
        }
        let t = kept.len() + 1;
        let mut dz = vec![0.0; t * dd];
        dz[..dd].copy_from_slice(&dh[..dd]);
        let mut is_kept = vec![false; c.seq_len - 1];
        for (r, &i) in kept.iter().enumerate() {
            is_kept[i] = true;
            dz[(r + 1) * dd..(r + 2) * dd].copy_from_slice(&dh[(i + 1) * dd..(i + 2) * dd]);
        }
        let dmask = l.mask_token.of_mut(g);
        for (i, _) in is_kept.iter().enumerate().filter(|(_, &k)| !k) {
            dmask
                .iter_mut()
                .zip(&dh[(i + 1) * dd..(i + 2) * dd])
                .for_each(|(a, b)| *a += b);
        }
        l.de.backward(p, g, &c.input, &dz, t)
    }

    /// Decoder patch embedding plus the first decoder block, applied to the
    /// given tokens only (no mask tokens): `n × decoder_dim`.
    pub(crate) fn prefix_forward(&self, p: &[f64], yt: &[f64], kept: &[usize]) -> (Vec<f64>, PrefixCache) {
        let l = &self.layout;
        let dd = self.config.decoder_dim;
        let t = kept.len() + 1;
        let mut z = l.de.forward(p, yt, t);
        for (r, &i) in kept.iter().enumerate() {
            let pos = &self.pos_dec[i * dd..(i + 1) * dd];
            z[(r + 1) * dd..(r + 2) * dd]
                .iter_mut()
                .zip(pos)
                .for_each(|(a, b)| *a += b);
        }
        let (out, block) = l.dec[0].forward(p, &z, t);
        (
            out,
            PrefixCache {
                input: yt.to_vec(),
                block,
            },
        )
    }

    pub(crate) fn prefix_backward(&self, p: &[f64], g: &mut [f64], c: &PrefixCache, dout: &[f64]) {
        let l = &self.layout;
        let dz = l.dec[0].backward(p, g, &c.block, dout);
        l.de.backward(p, g, &c.input, &dz, dz.len() / self.config.decoder_dim);
    }

    /// Parameter range covering [`prefix_forward`](Self::prefix_forward)'s weights.
    pub(crate) fn prefix_range(&self) -> Range<usize> {
        self.group_range(Group::DecoderPatchEmbed).start..self.group_range(Group::FirstDecoderLayer).end
    }

    fn distortion_weights(&self, kept: &[usize]) -> Vec<bool> {
        let total = self.config.num_patches();
        let mut masked = vec![true; total];
        for &i in kept {
            masked[i] = false;
        }
        if kept.len() == total {
            masked.fill(true);
        }
        masked
    }

    /// Masked-patch MSE and its gradient w.r.t. the decoder output.
    fn distortion(&self, pred: &[f64], patches: &[f64], kept: &[usize]) -> (f64, Vec<f64>) {
        let pd = self.config.patch_dim();
        let scored = self.distortion_weights(kept);
        let count = scored.iter().filter(|&&s| s).count() * pd;
        let mut d = 0.0;
        let mut dpred = vec![0.0; pred.len()];
        for (i, _) in scored.iter().enumerate().filter(|(_, &s)| s) {
            for j in 0..pd {
                let diff = pred[(i + 1) * pd + j] - patches[i * pd + j];
                d += diff * diff;
                dpred[(i + 1) * pd + j] = 2.0 * diff / count as f64;
            }
        }
        (d / count as f64, dpred)
    }

    fn grid_from_tokens(&self, yt: &[f64]) -> Tensor {
        let e = self.config.embed_dim;
        let n = yt.len() / e;
        Tensor::new(vec![n, e], yt.to_vec()).unwrap().transpose().unwrap()
    }

    pub fn forward(&self, x: &Tensor, seed: u64) -> Result<ForwardOutput> {
        let patches = self.patchify(x)?;
        let kept = self.sample_kept(self.config.mask_ratio, seed)?;
        let p = &self.params;
        let (yt, _) = self.encode(p, &patches, &kept);
        let (pred, _) = self.decode(p, &yt, &kept);
        let pd = self.config.patch_dim();
        let mut mask = vec![true; self.config.num_patches()];
        for &i in &kept {
            mask[i] = false;
        }
        Ok(ForwardOutput {
            y: self.grid_from_tokens(&yt),
            reconstruction: self.unpatchify(&pred[pd..])?,
            mask,
        })
    }

    /// Inference-path embedding under the configured mask ratio.
    pub fn embed(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        self.embed_with_ratio(x, self.config.mask_ratio, seed)
    }

    pub fn embed_with_ratio(&self, x: &Tensor, ratio: f64, seed: u64) -> Result<Tensor> {
        let patches = self.patchify(x)?;
        let kept = self.sample_kept(ratio, seed)?;
        let (yt, _) = self.encode(&self.params, &patches, &kept);
        Ok(self.grid_from_tokens(&yt))
    }

    /// `λ·D + R` on a single image with noise standing in for rounding.
    pub fn compression_loss(
        &self,
        x: &Tensor,
        density: &FactorizedDensity,
        lambda: f64,
        seed: u64,
    ) -> Result<LossParts> {
        self.loss_and_grad(x, Some(density), lambda, seed, 1.0, None, None)
    }

    /// [`compression_loss`](Self::compression_loss) and its gradient with
    /// respect to every model parameter, frozen or not.
    pub fn compression_loss_grad(
        &self,
        x: &Tensor,
        density: &FactorizedDensity,
        lambda: f64,
        seed: u64,
    ) -> Result<(LossParts, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let parts = self.loss_and_grad(x, Some(density), lambda, seed, 1.0, Some(&mut grad), None)?;
        Ok((parts, grad))
    }

    /// Loss on one image. When buffers are given, adds `weight · ∂loss` into
    /// `grad` (model parameters) and `dgrad` (density parameters).
    ///
    /// Without a density the objective is plain reconstruction: the decoder
    /// sees `y` itself, `R = 0` and `loss = D`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn loss_and_grad(
        &self,
        x: &Tensor,
        density: Option<&FactorizedDensity>,
        lambda: f64,
        seed: u64,
        weight: f64,
        grad: Option<&mut [f64]>,
        dgrad: Option<&mut [f64]>,
    ) -> Result<LossParts> {
        if !(lambda >= 0.0) {
            return Err(Error::Domain(format!("lambda {lambda} must be non-negative")));
        }
        if let Some(d) = density {
            if d.channels() != self.config.embed_dim {
                return Err(Error::Dimension(format!(
                    "density has {} channels, embedding has {}",
                    d.channels(),
                    self.config.embed_dim
                )));
            }
        }
        let patches = self.patchify(x)?;
        let kept = self.sample_kept(self.config.mask_ratio, seed)?;
        let p = &self.params;
        let e = self.config.embed_dim;
        let (yt, enc_cache) = self.encode(p, &patches, &kept);
        let t = kept.len() + 1;

        let (noisy_t, noisy) = match density {
            Some(_) => {
                let noisy = add_uniform_noise(&self.grid_from_tokens(&yt), noise_seed(seed));
                (noisy.transpose()?.into_data(), Some(noisy))
            }
            None => (yt.clone(), None),
        };
        let (pred, dec_cache) = self.decode(p, &noisy_t, &kept);
        let (distortion, mut dpred) = self.distortion(&pred, &patches, &kept);

        let Some(grad) = grad else {
            let rate = match (density, &noisy) {
                (Some(d), Some(n)) => d.rate_bits(n)?,
                _ => 0.0,
            };
            let loss = match density {
                Some(_) => lambda * distortion + rate,
                None => distortion,
            };
            return Ok(LossParts { loss, distortion, rate });
        };

        let dscale = if density.is_some() { lambda * weight } else { weight };
        dpred.iter_mut().for_each(|v| *v *= dscale);
        let mut dyt = self.decode_backward(p, grad, &dec_cache, &kept, &dpred);
        let mut rate = 0.0;
        if let (Some(d), Some(n)) = (density, &noisy) {
            let mut dgrid = vec![0.0; e * t];
            rate = d.accumulate_rate(n, weight, dgrad, Some(&mut dgrid))?;
            for c in 0..e {
                for tok in 0..t {
                    dyt[tok * e + c] += dgrid[c * t + tok];
                }
            }
        }
        self.encode_backward(p, grad, &enc_cache, &dyt);
        let loss = match density {
            Some(_) => lambda * distortion + rate,
            None => distortion,
        };
        Ok(LossParts { loss, distortion, rate })
    }
}
