//! Toy latent U-Net (resolutions 8, 4, 2 for a 64-pixel canvas) and the
//! zero-initialized pose branch.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionRecord, DecoupledCrossAttention, SelfAttention};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, GroupNorm, LayerNorm, Linear, Upsample};
use crate::params::Scope;
use crate::ppr::ConditioningBatch;
use crate::synthdata::NUM_KEYPOINTS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    /// LoRA rank for attention projections; `None` builds the plain base model.
    pub lora_rank: Option<usize>,
    /// Also put LoRA deltas on self-attention projections.
    pub self_attn_lora: bool,
    pub image_prompt: bool,
}

impl UNetConfig {
    pub fn base() -> Self {
        Self {
            latent_channels: super::vae::LATENT_CHANNELS,
            width: 64,
            time_dim: 128,
            groups: 8,
            heads: 4,
            text_dim: crate::encoders::TEXT_DIM,
            image_dim: 64,
            lora_rank: None,
            self_attn_lora: false,
            image_prompt: false,
        }
    }

    pub fn story() -> Self {
        Self {
            lora_rank: Some(crate::attention::DEFAULT_LORA_RANK),
            self_attn_lora: true,
            image_prompt: true,
            ..Self::base()
        }
    }
}

/// Number of cross-attention layers (one per resolution).
pub const NUM_ATTENTION_LAYERS: usize = 3;

/// Latent side divided by each attention layer's side.
pub const LAYER_DOWNSCALE: [usize; NUM_ATTENTION_LAYERS] = [4, 2, 1];

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(s: &mut Scope, in_c: usize, out_c: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut s.pp("norm1"), groups, in_c)?,
            conv1: Conv2d::new(&mut s.pp("conv1"), in_c, out_c, 3, 1)?,
            time_proj: Linear::new(&mut s.pp("time_proj"), time_dim, out_c, true)?,
            norm2: GroupNorm::new(&mut s.pp("norm2"), groups, out_c)?,
            conv2: Conv2d::new(&mut s.pp("conv2"), out_c, out_c, 3, 1)?,
            skip: if in_c != out_c {
                Some(Conv2d::new(&mut s.pp("skip"), in_c, out_c, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time_proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Self-attention, decoupled cross-attention and feed-forward over the
/// flattened feature map.
#[derive(Debug, Clone)]
pub struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: Linear,
    ln1: LayerNorm,
    pub self_attn: SelfAttention,
    ln2: LayerNorm,
    pub cross_attn: DecoupledCrossAttention,
    ln3: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    proj_out: Linear,
    layer: usize,
}

impl SpatialTransformer {
    pub fn new(s: &mut Scope, cfg: &UNetConfig, layer: usize) -> Result<Self> {
        let c = cfg.width;
        let self_rank = if cfg.self_attn_lora { cfg.lora_rank } else { None };
        Ok(Self {
            norm: GroupNorm::new(&mut s.pp("norm"), cfg.groups, c)?,
            proj_in: Linear::new(&mut s.pp("proj_in"), c, c, true)?,
            ln1: LayerNorm::new(&mut s.pp("ln1"), c)?,
            self_attn: SelfAttention::new(&mut s.pp("attn1"), c, cfg.heads, self_rank)?,
            ln2: LayerNorm::new(&mut s.pp("ln2"), c)?,
            cross_attn: DecoupledCrossAttention::new(
                &mut s.pp("attn2"),
                AttentionConfig {
                    query_dim: c,
                    text_dim: cfg.text_dim,
                    image_dim: cfg.image_dim,
                    heads: cfg.heads,
                    lora_rank: cfg.lora_rank,
                    image_prompt: cfg.image_prompt,
                },
            )?,
            ln3: LayerNorm::new(&mut s.pp("ln3"), c)?,
            ff_in: Linear::new(&mut s.pp("ff_in"), c, 4 * c, true)?,
            ff_out: Linear::new(&mut s.pp("ff_out"), 4 * c, c, true)?,
            proj_out: Linear::new(&mut s.pp("proj_out"), c, c, true)?,
            layer,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        text: &Tensor,
        image: Option<&ConditioningBatch>,
        record: bool,
    ) -> Result<(Tensor, Option<AttentionRecord>)> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let mut t = self.proj_in.forward(&tokens)?;
        t = (&t + self.self_attn.forward(&self.ln1.forward(&t)?)?)?;
        let rec_spec = record.then_some((self.layer, h, w));
        let (ca, rec) = self.cross_attn.attend(&self.ln2.forward(&t)?, text, image, rec_spec)?;
        t = (t + ca)?;
        let ff = self.ff_out.forward(&self.ff_in.forward(&self.ln3.forward(&t)?)?.gelu()?)?;
        t = (t + ff)?;
        let out = self.proj_out.forward(&t)?.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok(((x + out)?, rec))
    }
}

/// Encoder half shared (by construction) between the U-Net and the pose branch.
#[derive(Debug, Clone)]
pub struct DownPath {
    conv_in: Conv2d,
    down0: ResBlock,
    downsample0: Conv2d,
    down1: ResBlock,
    downsample1: Conv2d,
    mid0: ResBlock,
}

impl DownPath {
    fn new(s: &mut Scope, cfg: &UNetConfig, in_c: usize) -> Result<Self> {
        let (c, t, g) = (cfg.width, cfg.time_dim, cfg.groups);
        Ok(Self {
            conv_in: Conv2d::new(&mut s.pp("conv_in"), in_c, c, 3, 1)?,
            down0: ResBlock::new(&mut s.pp("down0"), c, c, t, g)?,
            downsample0: Conv2d::new(&mut s.pp("downsample0"), c, c, 3, 2)?,
            down1: ResBlock::new(&mut s.pp("down1"), c, c, t, g)?,
            downsample1: Conv2d::new(&mut s.pp("downsample1"), c, c, 3, 2)?,
            mid0: ResBlock::new(&mut s.pp("mid0"), c, c, t, g)?,
        })
    }
}

/// Residuals added to the two skip connections and the middle block.
#[derive(Debug, Clone)]
pub struct PoseResiduals {
    pub skip0: Tensor,
    pub skip1: Tensor,
    pub mid: Tensor,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    time_in: Linear,
    time_out: Linear,
    down: DownPath,
    mid_attn: SpatialTransformer,
    upsample1: Upsample,
    up1: ResBlock,
    up1_attn: SpatialTransformer,
    upsample0: Upsample,
    up0: ResBlock,
    up0_attn: SpatialTransformer,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(s: &mut Scope, cfg: UNetConfig) -> Result<Self> {
        let (c, t, g) = (cfg.width, cfg.time_dim, cfg.groups);
        Ok(Self {
            config: cfg,
            time_in: Linear::new(&mut s.pp("time_in"), c, t, true)?,
            time_out: Linear::new(&mut s.pp("time_out"), t, t, true)?,
            down: DownPath::new(s, &cfg, cfg.latent_channels)?,
            mid_attn: SpatialTransformer::new(&mut s.pp("mid_attn"), &cfg, 0)?,
            upsample1: Upsample::new(&mut s.pp("upsample1"), c)?,
            up1: ResBlock::new(&mut s.pp("up1"), 2 * c, c, t, g)?,
            up1_attn: SpatialTransformer::new(&mut s.pp("up1_attn"), &cfg, 1)?,
            upsample0: Upsample::new(&mut s.pp("upsample0"), c)?,
            up0: ResBlock::new(&mut s.pp("up0"), 2 * c, c, t, g)?,
            up0_attn: SpatialTransformer::new(&mut s.pp("up0_attn"), &cfg, 2)?,
            norm_out: GroupNorm::new(&mut s.pp("norm_out"), g, c)?,
            conv_out: Conv2d::new(&mut s.pp("conv_out"), c, cfg.latent_channels, 3, 1)?,
        })
    }

    pub fn transformers(&self) -> [&SpatialTransformer; NUM_ATTENTION_LAYERS] {
        [&self.mid_attn, &self.up1_attn, &self.up0_attn]
    }

    pub fn time_embedding(&self, timesteps: &[usize]) -> Result<Tensor> {
        let dtype = self.time_in.weight.dtype();
        let e = nn::timestep_embedding(timesteps, self.config.width, dtype)?;
        self.time_out.forward(&self.time_in.forward(&e)?.silu()?)
    }

    pub fn forward(
        &self,
        z: &Tensor,
        temb: &Tensor,
        text: &Tensor,
        image: Option<&ConditioningBatch>,
        pose: Option<&PoseResiduals>,
        record: bool,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::shape(format!("latent has {c} channels, model expects {}", self.config.latent_channels)));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("latent sides {h}x{w} must be divisible by 4")));
        }
        let d = &self.down;
        let x = d.conv_in.forward(z)?;
        let mut skip0 = d.down0.forward(&x, temb)?;
        let x = d.downsample0.forward(&skip0)?;
        let mut skip1 = d.down1.forward(&x, temb)?;
        let x = d.downsample1.forward(&skip1)?;
        let mut x = d.mid0.forward(&x, temb)?;
        if let Some(p) = pose {
            skip0 = (skip0 + &p.skip0)?;
            skip1 = (skip1 + &p.skip1)?;
            x = (x + &p.mid)?;
        }
        let mut records = Vec::new();
        let (x, r) = self.mid_attn.forward(&x, text, image, record)?;
        records.extend(r);
        let x = Tensor::cat(&[&self.upsample1.forward(&x)?, &skip1], 1)?;
        let x = self.up1.forward(&x, temb)?;
        let (x, r) = self.up1_attn.forward(&x, text, image, record)?;
        records.extend(r);
        let x = Tensor::cat(&[&self.upsample0.forward(&x)?, &skip0], 1)?;
        let x = self.up0.forward(&x, temb)?;
        let (x, r) = self.up0_attn.forward(&x, text, image, record)?;
        records.extend(r);
        let out = self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?;
        Ok((out, records))
    }
}

/// Trainable copy of the U-Net encoder driven by a pose raster. Its three
/// outputs pass through zero-initialized 1×1 convolutions.
#[derive(Debug, Clone)]
pub struct PoseBranch {
    hint: Vec<Conv2d>,
    hint_out: Conv2d,
    down: DownPath,
    zero_skip0: Conv2d,
    zero_skip1: Conv2d,
    zero_mid: Conv2d,
}

impl PoseBranch {
    /// Copies the U-Net encoder weights found under `unet_prefix`.
    pub fn new(s: &mut Scope, cfg: &UNetConfig, unet_prefix: &str) -> Result<Self> {
        let c = cfg.width;
        let hint = vec![
            Conv2d::new(&mut s.pp("hint0"), NUM_KEYPOINTS, 16, 3, 1)?,
            Conv2d::new(&mut s.pp("hint1"), 16, 32, 3, 2)?,
            Conv2d::new(&mut s.pp("hint2"), 32, 64, 3, 2)?,
        ];
        let hint_out = Conv2d::zeroed(&mut s.pp("hint_out"), 64, c, 3)?;
        let down = {
            let mut d = s.pp("copy");
            copy_down_path(&mut d, cfg, unet_prefix)?
        };
        Ok(Self {
            hint,
            hint_out,
            down,
            zero_skip0: Conv2d::zeroed(&mut s.pp("zero_skip0"), c, c, 1)?,
            zero_skip1: Conv2d::zeroed(&mut s.pp("zero_skip1"), c, c, 1)?,
            zero_mid: Conv2d::zeroed(&mut s.pp("zero_mid"), c, c, 1)?,
        })
    }

    /// `pose` is `(B, keypoints, 4h, 4w)` for an `h × w` latent.
    pub fn forward(&self, z: &Tensor, temb: &Tensor, pose: &Tensor) -> Result<PoseResiduals> {
        let (_, _, h, w) = z.dims4()?;
        let (_, k, ph, pw) = pose.dims4()?;
        if k != NUM_KEYPOINTS || ph != 4 * h || pw != 4 * w {
            return Err(Error::shape(format!(
                "pose raster {:?} does not match a {h}x{w} latent",
                pose.dims()
            )));
        }
        let mut g = pose.clone();
        for conv in &self.hint {
            g = conv.forward(&g)?.silu()?;
        }
        let d = &self.down;
        let x = (d.conv_in.forward(z)? + self.hint_out.forward(&g)?)?;
        let s0 = d.down0.forward(&x, temb)?;
        let x = d.downsample0.forward(&s0)?;
        let s1 = d.down1.forward(&x, temb)?;
        let x = d.downsample1.forward(&s1)?;
        let m = d.mid0.forward(&x, temb)?;
        Ok(PoseResiduals {
            skip0: self.zero_skip0.forward(&s0)?,
            skip1: self.zero_skip1.forward(&s1)?,
            mid: self.zero_mid.forward(&m)?,
        })
    }
}

fn copy_down_path(s: &mut Scope, cfg: &UNetConfig, src: &str) -> Result<DownPath> {
    use crate::params::Init;
    let (c, t, g) = (cfg.width, cfg.time_dim, cfg.groups);
    let conv = |s: &mut Scope, name: &str, in_c: usize, out_c: usize, stride: usize| -> Result<Conv2d> {
        let mut sub = s.pp(name);
        let src_name = format!("{src}.{name}");
        let weight = sub.get("weight", (out_c, in_c, 3, 3), Init::CopyOf(format!("{src_name}.weight")))?;
        let bias = sub.get("bias", out_c, Init::CopyOf(format!("{src_name}.bias")))?;
        Ok(Conv2d::from_parts(weight, bias, stride, 1))
    };
    let block = |s: &mut Scope, name: &str| -> Result<ResBlock> {
        let mut sub = s.pp(name);
        let src_name = format!("{src}.{name}");
        ResBlock::copied(&mut sub, &src_name, c, t, g)
    };
    Ok(DownPath {
        conv_in: conv(s, "conv_in", cfg.latent_channels, c, 1)?,
        down0: block(s, "down0")?,
        downsample0: conv(s, "downsample0", c, c, 2)?,
        down1: block(s, "down1")?,
        downsample1: conv(s, "downsample1", c, c, 2)?,
        mid0: block(s, "mid0")?,
    })
}

impl ResBlock {
    /// Same-width block initialized from the block at `src`.
    fn copied(s: &mut Scope, src: &str, c: usize, time_dim: usize, groups: usize) -> Result<Self> {
        use crate::params::Init;
        let mut get = |name: &str, shape: &[usize]| s.get(name, shape, Init::CopyOf(format!("{src}.{name}")));
        let norm1 = (get("norm1.weight", &[c])?, get("norm1.bias", &[c])?);
        let conv1 = (get("conv1.weight", &[c, c, 3, 3])?, get("conv1.bias", &[c])?);
        let time = (get("time_proj.weight", &[time_dim, c])?, get("time_proj.bias", &[c])?);
        let norm2 = (get("norm2.weight", &[c])?, get("norm2.bias", &[c])?);
        let conv2 = (get("conv2.weight", &[c, c, 3, 3])?, get("conv2.bias", &[c])?);
        Ok(Self {
            norm1: GroupNorm::from_parts(norm1.0, norm1.1, groups)?,
            conv1: Conv2d::from_parts(conv1.0, conv1.1, 1, 1),
            time_proj: Linear { weight: time.0, bias: Some(time.1) },
            norm2: GroupNorm::from_parts(norm2.0, norm2.1, groups)?,
            conv2: Conv2d::from_parts(conv2.0, conv2.1, 1, 1),
            skip: None,
        })
    }
}
