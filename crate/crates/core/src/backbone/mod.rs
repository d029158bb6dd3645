//! Latent diffusion backbone: VAE, U-Net with pose branch, noise schedule and
//! a deterministic DDIM sampler with classifier-free guidance.

pub mod unet;
pub mod vae;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};
use crate::nn::ensure_finite;
use crate::params::device;
use crate::ppr::ConditioningBatch;
pub use unet::{PoseBranch, UNet, UNetConfig};
pub use vae::{images_to_tensor, Vae, VaeMeta, LATENT_CHANNELS};

pub const DEFAULT_STEPS: usize = 25;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid("noise schedule needs 0 < beta_start <= beta_end < 1 and T >= 2"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    /// Per-sample `sqrt(ᾱ_t)` and `sqrt(1 − ᾱ_t)` as `(B, 1, 1, 1)` tensors.
    fn coefficients(&self, ts: &[usize], dtype: DType) -> Result<(Tensor, Tensor)> {
        for &t in ts {
            self.check_t(t)?;
        }
        let a: Vec<f64> = ts.iter().map(|&t| self.alphas_cumprod[t].sqrt()).collect();
        let s: Vec<f64> = ts.iter().map(|&t| (1.0 - self.alphas_cumprod[t]).sqrt()).collect();
        let shape = (ts.len(), 1, 1, 1);
        Ok((
            Tensor::from_vec(a, shape, &device())?.to_dtype(dtype)?,
            Tensor::from_vec(s, shape, &device())?.to_dtype(dtype)?,
        ))
    }

    /// `z_t = sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·ε`, one timestep per batch item.
    pub fn add_noise(&self, z0: &Tensor, ts: &[usize], noise: &Tensor) -> Result<Tensor> {
        if z0.dims() != noise.dims() || z0.dim(0)? != ts.len() {
            return Err(Error::shape("add_noise: latent, noise and timesteps disagree"));
        }
        let (a, s) = self.coefficients(ts, z0.dtype())?;
        Ok((z0.broadcast_mul(&a)? + noise.broadcast_mul(&s)?)?)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// Standard normal tensor drawn from a seeded ChaCha stream.
pub fn seeded_normal(shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, &device())?.to_dtype(dtype)?)
}

/// Conditioning for one denoiser call.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    /// `(B, T, D)` caption features.
    pub text: &'a Tensor,
    pub image: Option<&'a ConditioningBatch>,
    /// `(B, keypoints, 4h, 4w)` pose raster.
    pub pose: Option<&'a Tensor>,
}

/// The U-Net plus an optional pose branch.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub unet: UNet,
    pub pose: Option<PoseBranch>,
}

impl Denoiser {
    /// Predicts the noise in `z_t`. A missing pose raster (or missing pose
    /// branch) skips the branch entirely.
    pub fn predict_noise(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        cond: Conditioning,
        record: bool,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let b = z_t.dim(0)?;
        if ts.len() != b || cond.text.dim(0)? != b {
            return Err(Error::shape(format!("batch mismatch: latent {b}, timesteps {}, text {}", ts.len(), cond.text.dim(0)?)));
        }
        let temb = self.unet.time_embedding(ts)?;
        let residuals = match (&self.pose, cond.pose) {
            (Some(branch), Some(p)) => Some(branch.forward(z_t, &temb, p)?),
            _ => None,
        };
        let (eps, records) = self.unet.forward(z_t, &temb, cond.text, cond.image, residuals.as_ref(), record)?;
        ensure_finite(&eps, "noise prediction")?;
        Ok((eps, records))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            seed: 0,
        }
    }
}

/// Evenly spaced descending timesteps starting at `total − 1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let stride = total as f64 / steps as f64;
    (0..steps).map(|i| total - 1 - (i as f64 * stride).round() as usize).collect()
}

/// Deterministic DDIM sampling in latent space. `null` is the unconditional
/// conditioning used for guidance; with `guidance == 1` only the conditional
/// branch is evaluated.
pub fn sample_latents(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    shape: &[usize],
    cond: Conditioning,
    null: Conditioning,
    cfg: SamplerConfig,
) -> Result<Tensor> {
    if cfg.steps == 0 || cfg.steps > schedule.steps() {
        return Err(Error::invalid(format!("sampler steps must be in 1..={}", schedule.steps())));
    }
    if !cfg.guidance.is_finite() {
        return Err(Error::invalid("guidance must be finite"));
    }
    let dtype = cond.text.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = seeded_normal(shape, &mut rng, dtype)?;
    let b = shape[0];
    let ts = ddim_timesteps(schedule.steps(), cfg.steps);
    for (i, &t) in ts.iter().enumerate() {
        let tb = vec![t; b];
        let (eps_c, _) = denoiser.predict_noise(&z, &tb, cond, false)?;
        let eps = if cfg.guidance == 1.0 {
            eps_c
        } else {
            let (eps_u, _) = denoiser.predict_noise(&z, &tb, null, false)?;
            (&eps_u + ((eps_c - &eps_u)? * cfg.guidance)?)?
        };
        let a_t = schedule.alphas_cumprod[t];
        let a_prev = ts.get(i + 1).map(|&p| schedule.alphas_cumprod[p]).unwrap_or(1.0);
        let x0 = ((&z - (&eps * (1.0 - a_t).sqrt())?)? / a_t.sqrt())?;
        z = ((x0 * a_prev.sqrt())? + (eps * (1.0 - a_prev).sqrt())?)?;
        ensure_finite(&z, "sampler latent")?;
    }
    Ok(z)
}
