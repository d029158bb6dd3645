//! Diffusion loss, attention-region loss and their weighted sum.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};
use crate::nn::scalar_f64;
use crate::params::device;

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sd: f64,
    pub l_attn_per_layer: Vec<f64>,
    pub l_attn_mean: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss(noise: &Tensor, predicted: &Tensor) -> Result<Tensor> {
    if noise.dims() != predicted.dims() {
        return Err(Error::shape(format!(
            "diffusion loss: {:?} vs {:?}",
            noise.dims(),
            predicted.dims()
        )));
    }
    Ok((noise - predicted)?.sqr()?.mean_all()?)
}

/// Area-averages a binary `size × size` mask down to `res × res`.
pub fn downsample_mask(mask: &[u8], size: usize, res: usize) -> Result<Vec<f32>> {
    if res == 0 || size % res != 0 || mask.len() != size * size {
        return Err(Error::shape(format!("cannot pool a {size}px mask of {} values to {res}", mask.len())));
    }
    let f = size / res;
    let mut out = vec![0f32; res * res];
    for y in 0..size {
        for x in 0..size {
            out[(y / f) * res + x / f] += mask[y * size + x] as f32;
        }
    }
    let area = (f * f) as f32;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

/// Soft region targets for a batch at one layer resolution.
#[derive(Debug, Clone)]
pub struct MaskTargets {
    /// `(B, regions, h·w)`; absent regions are zero.
    pub masks: Tensor,
    /// `(B, regions)`, `1/(N+1)` on present regions and zero elsewhere.
    pub weights: Tensor,
}

impl MaskTargets {
    /// `scene_masks[b]` holds the `N_b + 1` canvas masks of scene `b`.
    pub fn new(scene_masks: &[&[Vec<u8>]], size: usize, res: usize, regions: usize, dtype: DType) -> Result<Self> {
        let pooled = scene_masks
            .iter()
            .map(|sm| {
                sm.iter()
                    .map(|m| downsample_mask(m, size, res))
                    .collect::<Result<Vec<_>>>()
                    .map(|v| v.concat())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_pooled(&pooled.iter().map(Vec::as_slice).collect::<Vec<_>>(), res, regions, dtype)
    }

    /// `pooled[b]` holds scene `b`'s `N_b + 1` masks already pooled to
    /// `res × res`, concatenated.
    pub fn from_pooled(pooled: &[&[f32]], res: usize, regions: usize, dtype: DType) -> Result<Self> {
        let b = pooled.len();
        let hw = res * res;
        let mut masks = vec![0f32; b * regions * hw];
        let mut weights = vec![0f32; b * regions];
        for (i, p) in pooled.iter().enumerate() {
            let n = p.len() / hw.max(1);
            if hw == 0 || p.len() % hw != 0 || n > regions || n == 0 {
                return Err(Error::shape(format!("scene has {} pooled values for {regions} regions of {hw}", p.len())));
            }
            let off = i * regions * hw;
            masks[off..off + p.len()].copy_from_slice(p);
            weights[i * regions..i * regions + n].fill(1.0 / n as f32);
        }
        Ok(Self {
            masks: Tensor::from_vec(masks, (b, regions, hw), &device())?.to_dtype(dtype)?,
            weights: Tensor::from_vec(weights, (b, regions), &device())?.to_dtype(dtype)?,
        })
    }
}

/// `(1/(N+1)) Σ_k mean_px (A_k − M_k)²`, averaged over the batch.
/// `maps` and `targets.masks` are `(B, regions, h·w)`.
pub fn attention_loss(maps: &Tensor, targets: &MaskTargets) -> Result<Tensor> {
    if maps.dims() != targets.masks.dims() {
        return Err(Error::shape(format!(
            "attention loss: maps {:?} vs masks {:?}",
            maps.dims(),
            targets.masks.dims()
        )));
    }
    let per_region = (maps - &targets.masks)?.sqr()?.mean(2)?;
    let per_scene = (per_region * &targets.weights)?.sum(1)?;
    Ok(per_scene.mean_all()?)
}

/// Loss for one scene: `maps` and `masks` are `(N+1, h·w)`.
pub fn attention_loss_single(maps: &Tensor, masks: &Tensor) -> Result<Tensor> {
    if maps.dims() != masks.dims() {
        return Err(Error::shape(format!("{} region maps vs {} masks", maps.dim(0)?, masks.dim(0)?)));
    }
    let regions = maps.dim(0)?;
    Ok(((maps - masks)?.sqr()?.mean(1)?.sum_all()? / regions as f64)?)
}

/// Attention loss for a record, with targets built for its resolution.
pub fn record_loss(record: &AttentionRecord, scene_masks: &[&[Vec<u8>]], canvas: usize) -> Result<Tensor> {
    if record.height != record.width {
        return Err(Error::shape("non-square attention layer"));
    }
    let regions = record.maps.dim(1)?;
    let t = MaskTargets::new(scene_masks, canvas, record.height, regions, record.maps.dtype())?;
    attention_loss(&record.maps, &t)
}

/// `l_sd + λ·mean(l_attn)` as a differentiable scalar.
pub fn composite_loss_tensor(l_sd: &Tensor, l_attn: &[Tensor], lambda: f64) -> Result<Tensor> {
    if l_attn.is_empty() {
        return Err(Error::invalid("composite loss needs at least one attention layer"));
    }
    let sum = l_attn.iter().skip(1).try_fold(l_attn[0].clone(), |acc, x| acc + x)?;
    Ok((l_sd + (sum * (lambda / l_attn.len() as f64))?)?)
}

pub fn composite_loss(l_sd: f64, l_attn: &[f64], lambda: f64) -> Result<LossReport> {
    if l_attn.is_empty() {
        return Err(Error::invalid("composite loss needs at least one attention layer"));
    }
    let mean = l_attn.iter().sum::<f64>() / l_attn.len() as f64;
    let report = LossReport {
        l_sd,
        l_attn_per_layer: l_attn.to_vec(),
        l_attn_mean: mean,
        total: l_sd + lambda * mean,
        lambda,
    };
    for (name, v) in [("l_sd", l_sd), ("l_attn", mean), ("total", report.total)] {
        if !v.is_finite() {
            return Err(Error::non_finite(name));
        }
    }
    Ok(report)
}

/// Reads scalar loss tensors into a report.
pub fn report_from_tensors(l_sd: &Tensor, l_attn: &[Tensor], lambda: f64) -> Result<LossReport> {
    let attn = l_attn.iter().map(scalar_f64).collect::<Result<Vec<_>>>()?;
    composite_loss(scalar_f64(l_sd)?, &attn, lambda)
}
