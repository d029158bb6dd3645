//! Positional-aware perceiver resampler.
//!
//! Two independent resamplers turn a face embedding and character patch
//! tokens into `L` tokens each. Per character slot the two outputs are
//! concatenated along channels, offset by a slot embedding and projected back
//! to width `D` by a small MLP. The image-prompt matrix is the learnable
//! background block followed by one block per character.

use std::ops::Range;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoders::FeatureSequence;
use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm, Linear};
use crate::params::{device, Init, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PprConfig {
    /// Tokens per region.
    pub num_tokens: usize,
    /// Output width.
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub face_dim: usize,
    pub char_dim: usize,
    pub max_characters: usize,
}

impl Default for PprConfig {
    fn default() -> Self {
        Self {
            num_tokens: 4,
            dim: 64,
            depth: 2,
            heads: 4,
            face_dim: crate::encoders::FACE_DIM,
            char_dim: crate::encoders::ENC_DIM,
            max_characters: 2,
        }
    }
}

#[derive(Debug, Clone)]
struct ResamplerLayer {
    norm_x: LayerNorm,
    norm_latents: LayerNorm,
    to_q: Linear,
    to_kv: Linear,
    to_out: Linear,
    ff_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Learnable latent queries cross-attending to a variable-length input.
#[derive(Debug, Clone)]
pub struct Resampler {
    proj_in: Linear,
    latents: Tensor,
    layers: Vec<ResamplerLayer>,
    proj_out: Linear,
    norm_out: LayerNorm,
    heads: usize,
    input_dim: usize,
}

impl Resampler {
    pub fn new(s: &mut Scope, input_dim: usize, num_tokens: usize, dim: usize, depth: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::shape(format!("width {dim} not divisible by {heads} heads")));
        }
        let latents = s.get("latents", (num_tokens, dim), Init::Normal { std: 1.0 / (dim as f64).sqrt() })?;
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let mut l = s.pp(&format!("layers.{i}"));
            layers.push(ResamplerLayer {
                norm_x: LayerNorm::new(&mut l.pp("norm_x"), dim)?,
                norm_latents: LayerNorm::new(&mut l.pp("norm_latents"), dim)?,
                to_q: Linear::new(&mut l.pp("to_q"), dim, dim, false)?,
                to_kv: Linear::new(&mut l.pp("to_kv"), dim, 2 * dim, false)?,
                to_out: Linear::new(&mut l.pp("to_out"), dim, dim, false)?,
                ff_norm: LayerNorm::new(&mut l.pp("ff_norm"), dim)?,
                ff_in: Linear::new(&mut l.pp("ff_in"), dim, 4 * dim, false)?,
                ff_out: Linear::new(&mut l.pp("ff_out"), 4 * dim, dim, false)?,
            });
        }
        Ok(Self {
            proj_in: Linear::new(&mut s.pp("proj_in"), input_dim, dim, true)?,
            latents,
            layers,
            proj_out: Linear::new(&mut s.pp("proj_out"), dim, dim, true)?,
            norm_out: LayerNorm::new(&mut s.pp("norm_out"), dim)?,
            heads,
            input_dim,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.latents.dim(0).unwrap_or(0)
    }

    /// `(B, T, input_dim)` → `(B, L, D)`; a rank-2 input yields a rank-2 output.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let unbatched = features.rank() == 2;
        let x = if unbatched { features.unsqueeze(0)? } else { features.clone() };
        let (b, t, d_in) = x.dims3()?;
        if t == 0 {
            return Err(Error::shape("resampler input has no tokens"));
        }
        if d_in != self.input_dim {
            return Err(Error::shape(format!(
                "resampler expects width {}, got {d_in}",
                self.input_dim
            )));
        }
        let x = self.proj_in.forward(&x)?;
        let (l, dim) = self.latents.dims2()?;
        let mut lat = self.latents.unsqueeze(0)?.broadcast_as((b, l, dim))?.contiguous()?;
        for layer in &self.layers {
            let xn = layer.norm_x.forward(&x)?;
            let ln = layer.norm_latents.forward(&lat)?;
            let q = layer.to_q.forward(&ln)?;
            let kv_in = Tensor::cat(&[&xn, &ln], 1)?;
            let kv = layer.to_kv.forward(&kv_in)?;
            let k = kv.narrow(2, 0, dim)?;
            let v = kv.narrow(2, dim, dim)?;
            let attn = multi_head_attention(&q, &k, &v, self.heads, None)?;
            lat = (lat + layer.to_out.forward(&attn)?)?;
            let ff = layer.ff_out.forward(&layer.ff_in.forward(&layer.ff_norm.forward(&lat)?)?.gelu()?)?;
            lat = (lat + ff)?;
        }
        let out = self.norm_out.forward(&self.proj_out.forward(&lat)?)?;
        Ok(if unbatched { out.squeeze(0)? } else { out })
    }
}

/// Scaled dot-product attention with `heads` heads over `(B, Tq, C)` queries
/// and `(B, Tk, C)` keys/values. `key_bias` is added to the logits, shaped
/// `(B, Tk)`. Returns `(B, Tq, C)`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, key_bias: Option<&Tensor>) -> Result<Tensor> {
    let (out, _) = attention_with_probs(q, k, v, heads, key_bias)?;
    Ok(out)
}

/// As [`multi_head_attention`], also returning the per-head probabilities
/// `(B, heads, Tq, Tk)`.
pub fn attention_with_probs(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    key_bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (b, tq, c) = q.dims3()?;
    let tk = k.dim(1)?;
    let dh = c / heads;
    let split = |x: &Tensor, t: usize| -> Result<Tensor> {
        Ok(x.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()?.reshape((b * heads, t, dh))?)
    };
    let (qh, kh, vh) = (split(q, tq)?, split(k, tk)?, split(v, tk)?);
    let mut logits = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
    if let Some(bias) = key_bias {
        let bias = bias.reshape((b, 1, 1, tk))?.broadcast_as((b, heads, tq, tk))?.reshape((b * heads, tq, tk))?;
        logits = (logits + bias)?;
    }
    let probs = nn::softmax_last(&logits)?;
    let out = probs
        .matmul(&vh)?
        .reshape((b, heads, tq, dh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, tq, c))?;
    Ok((out, probs.reshape((b, heads, tq, tk))?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionKind {
    Background,
    Character(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub kind: RegionKind,
    pub rows: Range<usize>,
}

/// Region layout for `n` characters with `l` tokens per region.
pub fn layout(n: usize, l: usize) -> Vec<Region> {
    (0..=n)
        .map(|k| Region {
            kind: if k == 0 { RegionKind::Background } else { RegionKind::Character(k - 1) },
            rows: k * l..(k + 1) * l,
        })
        .collect()
}

/// The image-prompt token matrix for one scene, `((N+1)·L × D)`.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub tokens: Tensor,
    pub num_characters: usize,
    pub tokens_per_region: usize,
    pub dim: usize,
}

impl ConditioningBundle {
    pub fn layout(&self) -> Vec<Region> {
        layout(self.num_characters, self.tokens_per_region)
    }

    pub fn rows(&self) -> usize {
        (self.num_characters + 1) * self.tokens_per_region
    }

    /// SHA-256 of the token values, for logging reuse across prompts.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(crate::params::tensor_bytes(&self.tokens)?)))
    }
}

/// Image prompts for a batch, padded to a common row count. Padded rows get
/// a large negative key bias so attention never reaches them.
#[derive(Debug, Clone)]
pub struct ConditioningBatch {
    /// `(B, R, D)`.
    pub tokens: Tensor,
    /// `(B, R)`, zero on real rows.
    pub key_bias: Option<Tensor>,
    pub counts: Vec<usize>,
    pub tokens_per_region: usize,
}

pub const MASKED_LOGIT: f64 = -1e9;

impl ConditioningBatch {
    pub fn from_bundles(bundles: &[&ConditioningBundle]) -> Result<Self> {
        let first = bundles.first().ok_or_else(|| Error::invalid("empty conditioning batch"))?;
        let (l, d) = (first.tokens_per_region, first.dim);
        if bundles.iter().any(|b| b.tokens_per_region != l || b.dim != d) {
            return Err(Error::shape("bundles disagree on token count or width"));
        }
        let rows = bundles.iter().map(|b| b.rows()).max().unwrap();
        let dtype = first.tokens.dtype();
        let mut padded = Vec::with_capacity(bundles.len());
        let mut bias = Vec::with_capacity(bundles.len() * rows);
        for b in bundles {
            let r = b.rows();
            let t = if r < rows {
                Tensor::cat(&[&b.tokens, &Tensor::zeros((rows - r, d), dtype, &device())?], 0)?
            } else {
                b.tokens.clone()
            };
            padded.push(t);
            bias.extend((0..rows).map(|i| if i < r { 0.0 } else { MASKED_LOGIT }));
        }
        let needs_bias = bias.iter().any(|&v| v != 0.0);
        Ok(Self {
            tokens: Tensor::stack(&padded, 0)?,
            key_bias: if needs_bias {
                Some(Tensor::from_vec(bias, (bundles.len(), rows), &device())?.to_dtype(dtype)?)
            } else {
                None
            },
            counts: bundles.iter().map(|b| b.num_characters).collect(),
            tokens_per_region: l,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.counts.len()
    }

    pub fn max_regions(&self) -> usize {
        self.tokens.dim(1).unwrap_or(0) / self.tokens_per_region
    }

    /// The same batch with every token zeroed (the unconditional image prompt).
    pub fn zeroed(&self) -> Result<Self> {
        Ok(Self {
            tokens: self.tokens.zeros_like()?,
            ..self.clone()
        })
    }
}

/// Reference features of one character.
#[derive(Debug, Clone)]
pub struct CharacterFeatures {
    /// `(1, face_dim)` or `(face_dim)`.
    pub face: Tensor,
    pub character: FeatureSequence,
}

#[derive(Debug, Clone)]
pub struct PositionalResampler {
    pub config: PprConfig,
    pub face: Resampler,
    pub character: Resampler,
    /// `(max_characters, L, 2D)`.
    pub slot_embedding: Tensor,
    /// `(L, D)`.
    pub background: Tensor,
    fuse_in: Linear,
    fuse_out: Linear,
}

impl PositionalResampler {
    pub fn new(s: &mut Scope, config: PprConfig) -> Result<Self> {
        let (l, d) = (config.num_tokens, config.dim);
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            config,
            face: Resampler::new(&mut s.pp("face"), config.face_dim, l, d, config.depth, config.heads)?,
            character: Resampler::new(&mut s.pp("character"), config.char_dim, l, d, config.depth, config.heads)?,
            slot_embedding: s.get("slot_embedding", (config.max_characters, l, 2 * d), Init::Normal { std })?,
            background: s.get("background", (l, d), Init::Normal { std })?,
            fuse_in: Linear::new(&mut s.pp("fuse_in"), 2 * d, 2 * d, true)?,
            fuse_out: Linear::new(&mut s.pp("fuse_out"), 2 * d, d, true)?,
        })
    }

    fn check_slot(&self, slot: usize) -> Result<()> {
        if slot >= self.config.max_characters {
            return Err(Error::invalid(format!(
                "character slot {slot} out of range (max {})",
                self.config.max_characters
            )));
        }
        Ok(())
    }

    /// Fuses per-slot resampler outputs: `e1, e2` are `(C, L, D)`, `slots`
    /// gives each row's character slot. Returns `(C, L, D)`.
    pub fn fuse_batch(&self, e1: &Tensor, e2: &Tensor, slots: &[usize]) -> Result<Tensor> {
        for &s in slots {
            self.check_slot(s)?;
        }
        if e1.dims() != e2.dims() || e1.dim(0)? != slots.len() {
            return Err(Error::shape(format!(
                "fuse: {:?} and {:?} for {} slots",
                e1.dims(),
                e2.dims(),
                slots.len()
            )));
        }
        let idx = Tensor::from_vec(slots.iter().map(|&s| s as u32).collect::<Vec<_>>(), slots.len(), &device())?;
        let pos = self.slot_embedding.index_select(&idx, 0)?;
        let cat = (Tensor::cat(&[e1, e2], D::Minus1)? + pos)?;
        self.fuse_out.forward(&self.fuse_in.forward(&cat)?.relu()?)
    }

    /// Single-slot fusion of two `(L, D)` matrices.
    pub fn fuse_character(&self, e1: &Tensor, e2: &Tensor, slot: usize) -> Result<Tensor> {
        Ok(self.fuse_batch(&e1.unsqueeze(0)?, &e2.unsqueeze(0)?, &[slot])?.squeeze(0)?)
    }

    pub fn resample_face(&self, face: &Tensor) -> Result<Tensor> {
        self.face.forward(face)
    }

    pub fn resample_character(&self, features: &FeatureSequence) -> Result<Tensor> {
        self.character.forward(&features.tokens)
    }

    /// Builds one bundle per scene. `faces` is `(C, face_dim)` and `chars`
    /// `(C, T, char_dim)` for all characters of all scenes in order;
    /// `counts[b]` is scene `b`'s character count and `zero_character[b]`
    /// replaces that scene's character-branch output with zeros.
    pub fn build_batch(&self, faces: &Tensor, chars: &Tensor, counts: &[usize], zero_character: &[bool]) -> Result<ConditioningBatch> {
        let total: usize = counts.iter().sum();
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::invalid("every scene needs at least one character reference"));
        }
        if counts.len() != zero_character.len() || faces.dim(0)? != total || chars.dim(0)? != total {
            return Err(Error::shape("reference features do not match character counts"));
        }
        let (l, d) = (self.config.num_tokens, self.config.dim);
        let dtype = self.background.dtype();
        let e1 = self.face.forward(&faces.unsqueeze(1)?)?;
        let mut e2 = self.character.forward(chars)?;
        if zero_character.iter().any(|&z| z) {
            let keep: Vec<f64> = counts
                .iter()
                .zip(zero_character)
                .flat_map(|(&n, &z)| std::iter::repeat_n(if z { 0.0 } else { 1.0 }, n))
                .collect();
            let keep = Tensor::from_vec(keep, (total, 1, 1), &device())?.to_dtype(dtype)?;
            e2 = e2.broadcast_mul(&keep)?;
        }
        let slots: Vec<usize> = counts.iter().flat_map(|&n| 0..n).collect();
        let fused = self.fuse_batch(&e1, &e2, &slots)?;

        let max_n = *counts.iter().max().unwrap();
        let rows = (max_n + 1) * l;
        let mut items = Vec::with_capacity(counts.len());
        let mut bias = Vec::with_capacity(counts.len() * rows);
        let mut offset = 0;
        for &n in counts {
            let mut parts = vec![self.background.clone()];
            parts.push(fused.narrow(0, offset, n)?.reshape((n * l, d))?);
            offset += n;
            if n < max_n {
                parts.push(Tensor::zeros(((max_n - n) * l, d), dtype, &device())?);
            }
            items.push(Tensor::cat(&parts, 0)?);
            bias.extend((0..rows).map(|i| if i < (n + 1) * l { 0.0 } else { MASKED_LOGIT }));
        }
        let needs_bias = counts.iter().any(|&n| n < max_n);
        Ok(ConditioningBatch {
            tokens: Tensor::stack(&items, 0)?,
            key_bias: if needs_bias {
                Some(Tensor::from_vec(bias, (counts.len(), rows), &device())?.to_dtype(dtype)?)
            } else {
                None
            },
            counts: counts.to_vec(),
            tokens_per_region: l,
        })
    }

    pub fn build_conditioning(&self, refs: &[CharacterFeatures], zero_character: bool) -> Result<ConditioningBundle> {
        if refs.is_empty() {
            return Err(Error::invalid("no character references"));
        }
        if refs.len() > self.config.max_characters {
            return Err(Error::invalid(format!(
                "{} character references exceed the maximum of {}",
                refs.len(),
                self.config.max_characters
            )));
        }
        let faces = refs
            .iter()
            .map(|r| r.face.flatten_all())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let chars = refs.iter().map(|r| r.character.tokens.clone()).collect::<Vec<_>>();
        let batch = self.build_batch(&Tensor::stack(&faces, 0)?, &Tensor::stack(&chars, 0)?, &[refs.len()], &[zero_character])?;
        Ok(ConditioningBundle {
            tokens: batch.tokens.squeeze(0)?,
            num_characters: refs.len(),
            tokens_per_region: self.config.num_tokens,
            dim: self.config.dim,
        })
    }
}

/// Rowwise `(1 − t)·a + t·b`.
pub fn interpolate_conditioning(a: &ConditioningBundle, b: &ConditioningBundle, t: f64) -> Result<ConditioningBundle> {
    if a.tokens.dims() != b.tokens.dims() || a.num_characters != b.num_characters || a.tokens_per_region != b.tokens_per_region {
        return Err(Error::shape(format!(
            "cannot interpolate bundles of shape {:?} and {:?}",
            a.tokens.dims(),
            b.tokens.dims()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation weight {t} outside [0, 1]")));
    }
    let tokens = if t == 0.0 {
        a.tokens.clone()
    } else if t == 1.0 {
        b.tokens.clone()
    } else {
        ((&a.tokens * (1.0 - t))? + (&b.tokens * t)?)?
    };
    Ok(ConditioningBundle { tokens, ..a.clone() })
}

pub fn zeros_like_dtype(shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, dtype, &device())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Role;
    use crate::params::ParamStore;

    fn store(dtype: DType) -> ParamStore {
        ParamStore::new(dtype, 5)
    }

    fn refs(n: usize, cfg: &PprConfig, seed: u64) -> Vec<CharacterFeatures> {
        let mut s = ParamStore::new(DType::F32, seed);
        (0..n)
            .map(|i| CharacterFeatures {
                face: s.get(&format!("f{i}"), cfg.face_dim, Init::Normal { std: 1.0 }).unwrap(),
                character: FeatureSequence::new(
                    s.get(&format!("c{i}"), (16, cfg.char_dim), Init::Normal { std: 1.0 }).unwrap(),
                    Role::Character,
                )
                .unwrap(),
            })
            .collect()
    }

    #[test]
    fn resampler_output_arity() {
        let mut st = store(DType::F32);
        let r = Resampler::new(&mut st.root().pp("r"), 8, 4, 16, 2, 4).unwrap();
        for t in [1, 16] {
            let x = Tensor::ones((t, 8), DType::F32, &device()).unwrap();
            assert_eq!(r.forward(&x).unwrap().dims(), &[4, 16]);
        }
        let bad = Tensor::ones((3, 7), DType::F32, &device()).unwrap();
        assert!(r.forward(&bad).is_err());
    }

    #[test]
    fn bundle_layout_and_background_rows() {
        let cfg = PprConfig { dim: 16, face_dim: 8, char_dim: 8, ..Default::default() };
        let mut st = store(DType::F32);
        let ppr = PositionalResampler::new(&mut st.root().pp("ppr"), cfg).unwrap();
        let b1 = ppr.build_conditioning(&refs(1, &cfg, 1), false).unwrap();
        assert_eq!(b1.tokens.dims(), &[8, 16]);
        let b2 = ppr.build_conditioning(&refs(2, &cfg, 2), false).unwrap();
        assert_eq!(b2.tokens.dims(), &[12, 16]);
        let bg = ppr.background.to_vec2::<f32>().unwrap();
        assert_eq!(b1.tokens.narrow(0, 0, 4).unwrap().to_vec2::<f32>().unwrap(), bg);
        assert_eq!(b2.tokens.narrow(0, 0, 4).unwrap().to_vec2::<f32>().unwrap(), bg);
        assert!(ppr.build_conditioning(&[], false).is_err());
        assert!(ppr.build_conditioning(&refs(3, &cfg, 3), false).is_err());
        assert!(ppr.fuse_character(&bg_tensor(&ppr), &bg_tensor(&ppr), 2).is_err());
    }

    fn bg_tensor(p: &PositionalResampler) -> Tensor {
        p.background.clone()
    }

    #[test]
    fn interpolation_endpoints_and_symmetry() {
        let dev = device();
        let a = ConditioningBundle {
            tokens: Tensor::new(&[[1f32, -2.], [3., 4.]], &dev).unwrap(),
            num_characters: 1,
            tokens_per_region: 1,
            dim: 2,
        };
        let b = ConditioningBundle { tokens: a.tokens.neg().unwrap(), ..a.clone() };
        let v = |x: &ConditioningBundle| x.tokens.to_vec2::<f32>().unwrap();
        assert_eq!(v(&interpolate_conditioning(&a, &b, 0.0).unwrap()), v(&a));
        assert_eq!(v(&interpolate_conditioning(&a, &b, 1.0).unwrap()), v(&b));
        assert_eq!(v(&interpolate_conditioning(&a, &b, 0.5).unwrap()), vec![vec![0.0; 2]; 2]);
        let c = ConditioningBundle { num_characters: 2, tokens: Tensor::zeros((3, 2), DType::F32, &dev).unwrap(), ..a.clone() };
        assert!(interpolate_conditioning(&a, &c, 0.5).is_err());
    }

    #[test]
    fn padded_batch_masks_absent_slots() {
        let cfg = PprConfig { dim: 16, face_dim: 8, char_dim: 8, ..Default::default() };
        let mut st = store(DType::F32);
        let ppr = PositionalResampler::new(&mut st.root().pp("ppr"), cfg).unwrap();
        let one = ppr.build_conditioning(&refs(1, &cfg, 1), false).unwrap();
        let two = ppr.build_conditioning(&refs(2, &cfg, 2), false).unwrap();
        let batch = ConditioningBatch::from_bundles(&[&one, &two]).unwrap();
        assert_eq!(batch.tokens.dims(), &[2, 12, 16]);
        let bias = batch.key_bias.unwrap().to_vec2::<f32>().unwrap();
        assert!(bias[0][..8].iter().all(|&v| v == 0.0) && bias[0][8..].iter().all(|&v| v < -1e8));
        assert!(bias[1].iter().all(|&v| v == 0.0));
    }
}
