//! Decoupled cross-attention with LoRA deltas and attention-map recording.
//!
//! Queries attend to caption keys and to image-prompt keys through two
//! independent softmaxes; the image term is scaled by `gamma` and added to the
//! text term. Every projection carries an optional low-rank delta.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{self, matmul_last};
use crate::params::{device, Init, Scope};
use crate::ppr::{attention_with_probs, multi_head_attention, ConditioningBatch, MASKED_LOGIT};

pub const DEFAULT_LORA_RANK: usize = 4;

/// Low-rank factors `down: (d_in, r)` and `up: (r, d_out)`.
#[derive(Debug, Clone)]
pub struct LoraDelta {
    pub down: Tensor,
    pub up: Tensor,
    pub scale: f64,
}

impl LoraDelta {
    /// `down` random, `up` zero, `scale = 1/r`.
    pub fn new(s: &mut Scope, d_in: usize, d_out: usize, rank: usize) -> Result<Self> {
        Ok(Self {
            down: s.get("lora_down", (d_in, rank), Init::kaiming(d_in))?,
            up: s.get("lora_up", (rank, d_out), Init::Zeros)?,
            scale: 1.0 / rank as f64,
        })
    }

    pub fn delta(&self) -> Result<Tensor> {
        Ok((self.down.matmul(&self.up)? * self.scale)?)
    }
}

/// `W + scale·down·up`.
pub fn apply_lora(weight: &Tensor, delta: &LoraDelta) -> Result<Tensor> {
    let (d_in, d_out) = weight.dims2()?;
    let (a, r) = delta.down.dims2()?;
    let (r2, b) = delta.up.dims2()?;
    if a != d_in || b != d_out || r != r2 {
        return Err(Error::shape(format!(
            "lora factors {:?}·{:?} do not fit weight {:?}",
            delta.down.dims(),
            delta.up.dims(),
            weight.dims()
        )));
    }
    if delta.scale == 0.0 {
        return Ok(weight.clone());
    }
    Ok((weight + delta.delta()?)?)
}

/// A bias-free projection `x·(W + ΔW)`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub weight: Tensor,
    pub lora: Option<LoraDelta>,
}

impl Projection {
    pub fn new(s: &mut Scope, d_in: usize, d_out: usize, lora_rank: Option<usize>) -> Result<Self> {
        Self::with_init(s, d_in, d_out, lora_rank, Init::kaiming(d_in))
    }

    pub fn with_init(s: &mut Scope, d_in: usize, d_out: usize, lora_rank: Option<usize>, init: Init) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", (d_in, d_out), init)?,
            lora: lora_rank.map(|r| LoraDelta::new(s, d_in, d_out, r)).transpose()?,
        })
    }

    pub fn effective(&self) -> Result<Tensor> {
        match &self.lora {
            Some(l) => apply_lora(&self.weight, l),
            None => Ok(self.weight.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        matmul_last(x, &self.effective()?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub query_dim: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub heads: usize,
    pub lora_rank: Option<usize>,
    /// Whether the layer has the image-prompt branch at all.
    pub image_prompt: bool,
}

/// Per-layer image-branch attention, averaged over heads.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    /// `(B, h·w, R)` row-stochastic probabilities over image-prompt rows.
    pub probs: Tensor,
    /// `(B, regions, h·w)` with `regions = R / L`; regions past a scene's
    /// character count are zero.
    pub maps: Tensor,
    pub counts: Vec<usize>,
}

/// Sums each region's `l` columns of `probs (B, Q, R)`, giving `(B, R/l, Q)`.
pub fn aggregate_region_maps(probs: &Tensor, tokens_per_region: usize) -> Result<Tensor> {
    let (b, q, r) = probs.dims3()?;
    if tokens_per_region == 0 || r % tokens_per_region != 0 {
        return Err(Error::shape(format!(
            "{r} prompt columns do not split into regions of {tokens_per_region}"
        )));
    }
    let regions = r / tokens_per_region;
    let mut ind = vec![0f64; r * regions];
    for row in 0..r {
        ind[row * regions + row / tokens_per_region] = 1.0;
    }
    let ind = Tensor::from_vec(ind, (r, regions), &device())?.to_dtype(probs.dtype())?;
    Ok(matmul_last(probs, &ind)?.reshape((b, q, regions))?.transpose(1, 2)?.contiguous()?)
}

#[derive(Debug, Clone)]
pub struct DecoupledCrossAttention {
    pub to_q: Projection,
    pub to_k: Projection,
    pub to_v: Projection,
    pub image: Option<ImageBranch>,
    pub to_out: Projection,
    pub out_bias: Tensor,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct ImageBranch {
    pub to_k_ip: Projection,
    pub to_v_ip: Projection,
    /// 0-dim scale of the image term.
    pub gamma: Tensor,
}

impl DecoupledCrossAttention {
    /// Image-branch key/value weights start as copies of the text ones.
    pub fn new(s: &mut Scope, cfg: AttentionConfig) -> Result<Self> {
        if cfg.query_dim % cfg.heads != 0 {
            return Err(Error::shape(format!("{} not divisible by {} heads", cfg.query_dim, cfg.heads)));
        }
        let r = cfg.lora_rank;
        let to_k = Projection::new(&mut s.pp("to_k"), cfg.text_dim, cfg.query_dim, r)?;
        let to_v = Projection::new(&mut s.pp("to_v"), cfg.text_dim, cfg.query_dim, r)?;
        let image = if cfg.image_prompt {
            let ip_init = |src: &str| {
                if cfg.image_dim == cfg.text_dim {
                    Init::CopyOf(s.path(src))
                } else {
                    Init::kaiming(cfg.image_dim)
                }
            };
            let (k_init, v_init) = (ip_init("to_k.weight"), ip_init("to_v.weight"));
            Some(ImageBranch {
                to_k_ip: Projection::with_init(&mut s.pp("to_k_ip"), cfg.image_dim, cfg.query_dim, r, k_init)?,
                to_v_ip: Projection::with_init(&mut s.pp("to_v_ip"), cfg.image_dim, cfg.query_dim, r, v_init)?,
                gamma: s.get("gamma", (), Init::Const(1.0))?,
            })
        } else {
            None
        };
        Ok(Self {
            to_q: Projection::new(&mut s.pp("to_q"), cfg.query_dim, cfg.query_dim, r)?,
            to_k,
            to_v,
            image,
            to_out: Projection::new(&mut s.pp("to_out"), cfg.query_dim, cfg.query_dim, r)?,
            out_bias: s.get("to_out.bias", cfg.query_dim, Init::Zeros)?,
            heads: cfg.heads,
        })
    }

    /// `z: (B, h·w, C)`, `text: (B, Tt, Dt)`. Returns the updated features and,
    /// when `record` is set and an image prompt is given, the attention record.
    pub fn attend(
        &self,
        z: &Tensor,
        text: &Tensor,
        image: Option<&ConditioningBatch>,
        record: Option<(usize, usize, usize)>,
    ) -> Result<(Tensor, Option<AttentionRecord>)> {
        let (b, q_len, c) = z.dims3()?;
        if text.dim(0)? != b {
            return Err(Error::shape(format!("text batch {} vs query batch {b}", text.dim(0)?)));
        }
        if let Some((_, h, w)) = record {
            if h * w != q_len {
                return Err(Error::shape(format!("record grid {h}x{w} does not cover {q_len} queries")));
            }
        }
        let q = self.to_q.forward(z)?;
        if q.dim(2)? != c {
            return Err(Error::shape("query projection changes width"));
        }
        let k_t = self.to_k.forward(text)?;
        let v_t = self.to_v.forward(text)?;
        let mut out = multi_head_attention(&q, &k_t, &v_t, self.heads, None)?;
        let mut rec = None;
        if let (Some(img), Some(branch)) = (image, &self.image) {
            if img.batch_size() != b {
                return Err(Error::shape(format!("image prompt batch {} vs {b}", img.batch_size())));
            }
            let k_i = branch.to_k_ip.forward(&img.tokens)?;
            let v_i = branch.to_v_ip.forward(&img.tokens)?;
            let (img_out, probs) = attention_with_probs(&q, &k_i, &v_i, self.heads, img.key_bias.as_ref())?;
            out = (out + img_out.broadcast_mul(&branch.gamma)?)?;
            if let Some((layer, height, width)) = record {
                let probs = probs.mean(1)?;
                let maps = aggregate_region_maps(&probs, img.tokens_per_region)?;
                rec = Some(AttentionRecord {
                    layer,
                    height,
                    width,
                    probs,
                    maps,
                    counts: img.counts.clone(),
                });
            }
        }
        let y = self.to_out.forward(&out)?.broadcast_add(&self.out_bias)?;
        Ok((y, rec))
    }
}

/// Multi-head self-attention with an on/off LoRA switch.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub to_q: Projection,
    pub to_k: Projection,
    pub to_v: Projection,
    pub to_out: Projection,
    pub out_bias: Tensor,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(s: &mut Scope, dim: usize, heads: usize, lora_rank: Option<usize>) -> Result<Self> {
        Ok(Self {
            to_q: Projection::new(&mut s.pp("to_q"), dim, dim, lora_rank)?,
            to_k: Projection::new(&mut s.pp("to_k"), dim, dim, lora_rank)?,
            to_v: Projection::new(&mut s.pp("to_v"), dim, dim, lora_rank)?,
            to_out: Projection::new(&mut s.pp("to_out"), dim, dim, lora_rank)?,
            out_bias: s.get("to_out.bias", dim, Init::Zeros)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let q = self.to_q.forward(x)?;
        let k = self.to_k.forward(x)?;
        let v = self.to_v.forward(x)?;
        let o = multi_head_attention(&q, &k, &v, self.heads, None)?;
        Ok(self.to_out.forward(&o)?.broadcast_add(&self.out_bias)?)
    }
}

/// Row sums of a probability tensor's last axis, for invariant checks.
pub fn row_sums(probs: &Tensor) -> Result<Vec<f64>> {
    nn::to_vec_f64(&probs.sum(D::Minus1)?)
}

/// True when a key-bias entry masks its column.
pub fn is_masked(bias: f64) -> bool {
    bias <= MASKED_LOGIT / 2.0
}
