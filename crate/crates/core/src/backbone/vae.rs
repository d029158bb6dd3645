//! Small convolutional VAE mapping 64×64 RGB to a 4×8×8 latent. Both ends
//! work on 4×4 pixel blocks folded into channels.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{depth_to_space, space_to_depth, Conv2d};
use crate::params::ParamStore;
use crate::synthdata::LATENT_FACTOR;

pub const LATENT_CHANNELS: usize = 4;

/// Stacks CHW canvases into a `(B, 3, size, size)` tensor.
pub fn images_to_tensor(images: &[&[f32]], size: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        if img.len() != 3 * size * size {
            return Err(Error::shape(format!("image of {} values is not 3x{size}x{size}", img.len())));
        }
        data.extend_from_slice(img);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), &crate::params::device())?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeMeta {
    /// Multiplier applied to posterior means so latents have roughly unit variance.
    pub scale_factor: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone)]
struct Encoder {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: Conv2d,
    mid: Conv2d,
    /// The first stage doubles the resolution (nearest) before convolving.
    ups: Vec<Conv2d>,
    conv_out: Conv2d,
}

#[derive(Debug)]
pub struct Vae {
    encoder: Encoder,
    decoder: Decoder,
    pub scale_factor: f64,
    pub store: ParamStore,
}

/// Block size of the pixel (un)shuffle at either end of the VAE.
const PATCH: usize = 4;

impl Vae {
    pub fn from_store(mut store: ParamStore, scale_factor: f64) -> Result<Self> {
        let p2 = PATCH * PATCH;
        let mut root = store.root();
        let mut e = root.pp("encoder");
        let encoder = Encoder {
            convs: vec![
                Conv2d::new(&mut e.pp("conv0"), 3 * p2, 64, 3, 1)?,
                Conv2d::new(&mut e.pp("conv1"), 64, 64, 3, 1)?,
                Conv2d::new(&mut e.pp("conv2"), 64, 64, 3, 2)?,
                Conv2d::new(&mut e.pp("conv3"), 64, 64, 3, 1)?,
            ],
            head: Conv2d::new(&mut e.pp("head"), 64, 2 * LATENT_CHANNELS, 1, 1)?,
        };
        let mut d = root.pp("decoder");
        let decoder = Decoder {
            conv_in: Conv2d::new(&mut d.pp("conv_in"), LATENT_CHANNELS, 64, 3, 1)?,
            mid: Conv2d::new(&mut d.pp("mid"), 64, 64, 3, 1)?,
            ups: vec![Conv2d::new(&mut d.pp("up0"), 64, 64, 3, 1)?, Conv2d::new(&mut d.pp("up1"), 64, 64, 3, 1)?],
            conv_out: Conv2d::new(&mut d.pp("conv_out"), 64, 3 * p2, 3, 1)?,
        };
        Ok(Self {
            encoder,
            decoder,
            scale_factor,
            store,
        })
    }

    pub fn random(seed: u64) -> Result<Self> {
        Self::from_store(ParamStore::new(DType::F32, seed), 1.0)
    }

    fn check_dims(x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
            return Err(Error::shape(format!(
                "image of shape {:?} must be 3-channel with sides divisible by {LATENT_FACTOR}",
                x.dims()
            )));
        }
        Ok(())
    }

    /// Posterior mean and log-variance, unscaled.
    pub fn posterior(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Self::check_dims(x)?;
        let mut h = space_to_depth(&((x * 2.0)? - 1.0)?, PATCH)?;
        for c in &self.encoder.convs {
            h = c.forward(&h)?.silu()?;
        }
        let stats = self.encoder.head.forward(&h)?;
        let mean = stats.narrow(1, 0, LATENT_CHANNELS)?;
        let logvar = stats.narrow(1, LATENT_CHANNELS, LATENT_CHANNELS)?.clamp(-20.0, 5.0)?;
        Ok((mean, logvar))
    }

    /// Unscaled latent to image (values roughly in `[0, 1]`, not clamped).
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let d = &self.decoder;
        let mut h = d.conv_in.forward(z)?.silu()?;
        h = d.mid.forward(&h)?.silu()?;
        let (_, _, hh, ww) = h.dims4()?;
        h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
        for up in &d.ups {
            h = up.forward(&h)?.silu()?;
        }
        let rgb = depth_to_space(&d.conv_out.forward(&h)?, PATCH)?;
        Ok(((rgb + 1.0)? * 0.5)?)
    }

    /// Deterministic encoding (posterior mean), scaled for diffusion.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (mean, _) = self.posterior(x)?;
        Ok((mean * self.scale_factor)?)
    }

    /// Scaled latent to an image clamped to `[0, 1]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(&(z / self.scale_factor)?)?.clamp(0.0, 1.0)?)
    }

    /// Encodes CHW canvases in chunks, returning one flat latent per image.
    pub fn encode_images(&self, images: &[&[f32]], size: usize, chunk: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let z = self.encode(&images_to_tensor(part, size, self.store.dtype())?)?;
            for i in 0..part.len() {
                out.push(z.get(i)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?);
            }
        }
        Ok(out)
    }

    pub fn load(dir: &Path) -> Result<(Self, VaeMeta)> {
        let (manifest, values) = crate::checkpoint::load(dir)?;
        if manifest.kind != "vae" {
            return Err(Error::checkpoint(dir, format!("expected a vae checkpoint, found {:?}", manifest.kind)));
        }
        let meta: VaeMeta = serde_json::from_value(manifest.meta.clone())
            .map_err(|e| Error::checkpoint(dir, format!("bad vae metadata: {e}")))?;
        let vae = Self::from_store(ParamStore::with_values(DType::F32, 0, values), meta.scale_factor)?;
        let unused = vae.store.unused_values();
        if !unused.is_empty() {
            return Err(Error::checkpoint(dir, format!("unexpected tensors: {unused:?}")));
        }
        Ok((vae, meta))
    }

    pub fn save(&self, dir: &Path, meta: VaeMeta) -> Result<()> {
        crate::checkpoint::save(dir, "vae", serde_json::to_value(meta)?, &self.store.named_tensors())?;
        Ok(())
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum(|_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::device;

    #[test]
    fn latent_shape_is_one_eighth() {
        let vae = Vae::random(0).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &device()).unwrap();
        let z = vae.encode(&x).unwrap();
        assert_eq!(z.dims(), &[1, LATENT_CHANNELS, 8, 8]);
        assert_eq!(vae.decode(&z).unwrap().dims(), &[1, 3, 64, 64]);
        let z2 = vae.encode(&x).unwrap();
        assert_eq!(
            z.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            z2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let bad = Tensor::zeros((1, 3, 60, 64), DType::F32, &device()).unwrap();
        assert!(vae.encode(&bad).is_err());
    }
}
