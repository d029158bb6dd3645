//! The story model: frozen base U-Net with LoRA and image-prompt branches,
//! the pose branch and the positional resampler, kept in one parameter store.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{sample_latents, Conditioning, Denoiser, NoiseSchedule, PoseBranch, SamplerConfig, UNet, UNetConfig, Vae};
use crate::checkpoint::{self, Manifest};
use crate::encoders::{pose_tensor, Encoders};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::ppr::{ConditioningBatch, ConditioningBundle, PositionalResampler, PprConfig};
use crate::pretrain::{BaseModel, BASE_PREFIX};
use crate::synthdata::{CharacterReference, PoseMap, LATENT_FACTOR};

pub const STORY_KIND: &str = "story";

/// Prefix of optimizer tensors stored alongside model weights.
pub const OPTIMIZER_PREFIX: &str = "adam.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub ppr: PprConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::story(),
            ppr: PprConfig::default(),
        }
    }
}

/// Parameters updated by story training: the resampler (including slot and
/// background embeddings), the pose branch, image-branch key/value
/// projections and every LoRA factor. Everything else is frozen.
pub fn is_story_trainable(name: &str) -> bool {
    name.starts_with("ppr.")
        || name.starts_with("pose.")
        || name.contains(".lora_")
        || name.contains(".to_k_ip.")
        || name.contains(".to_v_ip.")
}

/// Named groups of the trainable set; each must be non-empty.
pub const TRAINABLE_GROUPS: [(&str, fn(&str) -> bool); 7] = [
    ("resampler", |n| n.starts_with("ppr.face.") || n.starts_with("ppr.character.") || n.starts_with("ppr.fuse_")),
    ("slot embedding", |n| n == "ppr.slot_embedding"),
    ("background embedding", |n| n == "ppr.background"),
    ("image key projection", |n| n.contains(".to_k_ip.weight")),
    ("image value projection", |n| n.contains(".to_v_ip.weight")),
    ("lora", |n| n.contains(".lora_")),
    ("pose branch", |n| n.starts_with("pose.")),
];

#[derive(Debug)]
pub struct StoryModel {
    pub config: ModelConfig,
    pub denoiser: Denoiser,
    pub ppr: PositionalResampler,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
}

impl StoryModel {
    /// Builds the model, taking parameters from `values` where present.
    /// Checkpoint entries that no module asks for are an error.
    pub fn build(values: BTreeMap<String, Tensor>, seed: u64, config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::with_values(DType::F32, seed, values);
        store.set_trainable(is_story_trainable);
        let (unet, pose, ppr) = {
            let mut root = store.root();
            let unet = UNet::new(&mut root.pp(BASE_PREFIX), config.unet)?;
            let pose = PoseBranch::new(&mut root.pp("pose"), &config.unet, BASE_PREFIX)?;
            let ppr = PositionalResampler::new(&mut root.pp("ppr"), config.ppr)?;
            (unet, pose, ppr)
        };
        let unused = store.unused_values();
        if !unused.is_empty() {
            return Err(Error::invalid(format!("unexpected parameters: {unused:?}")));
        }
        let model = Self {
            config,
            denoiser: Denoiser { unet, pose: Some(pose) },
            ppr,
            schedule: NoiseSchedule::default(),
            store,
        };
        model.check_partition()?;
        Ok(model)
    }

    /// Fresh story parameters on top of a pretrained base U-Net.
    pub fn from_base(base: &BaseModel, seed: u64) -> Result<Self> {
        Self::build(base.values(), seed, ModelConfig::default())
    }

    /// Verifies the trainable set: every group present, every trainable
    /// name covered by the predicate and nothing else trainable.
    pub fn check_partition(&self) -> Result<()> {
        let trainable = self.store.trainable_names();
        for (group, pred) in TRAINABLE_GROUPS {
            if !trainable.iter().any(|n| pred(n)) {
                return Err(Error::invalid(format!("trainable group {group:?} is empty")));
            }
        }
        if let Some(n) = trainable.iter().find(|n| !is_story_trainable(n)) {
            return Err(Error::invalid(format!("{n} is trainable but outside the declared set")));
        }
        if let Some(n) = self.store.frozen_names().iter().find(|n| is_story_trainable(n)) {
            return Err(Error::invalid(format!("{n} is declared trainable but frozen")));
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let (manifest, values) = checkpoint::load(dir)?;
        if manifest.kind != STORY_KIND {
            return Err(Error::checkpoint(dir, format!("expected a story checkpoint, found {:?}", manifest.kind)));
        }
        let config: ModelConfig = serde_json::from_value(manifest.meta["model"].clone())
            .map_err(|e| Error::checkpoint(dir, format!("bad model config: {e}")))?;
        let values = values.into_iter().filter(|(n, _)| !n.starts_with(OPTIMIZER_PREFIX)).collect();
        let model = Self::build(values, 0, config).map_err(|e| Error::checkpoint(dir, e.to_string()))?;
        Ok((model, manifest))
    }

    /// Writes weights plus `extra` tensors; `meta` gains a `model` entry.
    pub fn save(&self, dir: &Path, mut meta: serde_json::Value, extra: &[(String, Tensor)]) -> Result<Manifest> {
        if !meta.is_object() {
            meta = serde_json::json!({});
        }
        meta["model"] = serde_json::to_value(self.config)?;
        let mut tensors = self.store.named_tensors();
        tensors.extend(extra.iter().cloned());
        checkpoint::save(dir, STORY_KIND, meta, &tensors)
    }

    /// Sets the image-branch scale of every cross-attention layer.
    pub fn set_gamma(&self, gamma: f64) -> Result<()> {
        if !gamma.is_finite() {
            return Err(Error::invalid("gamma must be finite"));
        }
        let value = Tensor::new(gamma as f32, &crate::params::device())?;
        for name in self.store.names().filter(|n| n.ends_with(".gamma")) {
            self.store.assign(name, &value)?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum(|_| true)
    }

    /// Face embeddings `(C, face_dim)` and character tokens `(C, T, dim)`.
    pub fn reference_features(encoders: &Encoders, refs: &[&CharacterReference]) -> Result<(Tensor, Tensor)> {
        let faces = encoders.face.encode(&refs.iter().map(|r| &r.face_crop).collect::<Vec<_>>())?;
        let chars = encoders.character.encode(&refs.iter().map(|r| &r.body_crop).collect::<Vec<_>>())?;
        Ok((faces, chars.tokens))
    }

    /// Conditioning for one set of reference characters (slot order kept).
    pub fn conditioning(&self, encoders: &Encoders, refs: &[&CharacterReference], zero_character: bool) -> Result<ConditioningBundle> {
        if refs.is_empty() || refs.len() > self.config.ppr.max_characters {
            return Err(Error::invalid(format!(
                "{} reference characters; between 1 and {} are supported",
                refs.len(),
                self.config.ppr.max_characters
            )));
        }
        let (faces, chars) = Self::reference_features(encoders, refs)?;
        let batch = self.ppr.build_batch(&faces, &chars, &[refs.len()], &[zero_character])?;
        Ok(ConditioningBundle {
            tokens: batch.tokens.squeeze(0)?,
            num_characters: refs.len(),
            tokens_per_region: self.config.ppr.num_tokens,
            dim: self.config.ppr.dim,
        })
    }

    /// Samples one image per caption, conditioned on the matching bundle
    /// (or on no image prompt). Guidance contrasts against the null caption
    /// with zeroed image tokens. Without `poses` the pose branch is skipped
    /// entirely. Returns CHW images in `[0, 1]`.
    pub fn generate(
        &self,
        vae: &Vae,
        encoders: &Encoders,
        bundles: Option<&[&ConditioningBundle]>,
        captions: &[&[u32]],
        poses: Option<&[&PoseMap]>,
        canvas_size: usize,
        sampler: SamplerConfig,
    ) -> Result<Vec<Vec<f32>>> {
        let b = captions.len();
        if b == 0 {
            return Err(Error::invalid("no prompts"));
        }
        if poses.is_some_and(|p| p.len() != b) || bundles.is_some_and(|bd| bd.len() != b) {
            return Err(Error::invalid(format!("poses and bundles must match the {b} prompts")));
        }
        let text = encoders.text.encode_batch(captions)?;
        let null_text = encoders.text.encode_batch(&vec![&[][..]; b])?;
        let image = bundles.map(ConditioningBatch::from_bundles).transpose()?;
        let null_image = image.as_ref().map(ConditioningBatch::zeroed).transpose()?;
        let pose = match poses {
            Some(p) => Some(pose_tensor(p, canvas_size * 4 / LATENT_FACTOR, DType::F32)?),
            None => None,
        };
        let side = canvas_size / LATENT_FACTOR;
        let shape = [b, self.config.unet.latent_channels, side, side];
        let cond = Conditioning {
            text: &text,
            image: image.as_ref(),
            pose: pose.as_ref(),
        };
        let null = Conditioning {
            text: &null_text,
            image: null_image.as_ref(),
            pose: pose.as_ref(),
        };
        let z = sample_latents(&self.denoiser, &self.schedule, &shape, cond, null, sampler)?;
        let x = vae.decode(&z)?;
        (0..b)
            .map(|i| Ok(x.get(i)?.flatten_all()?.to_vec1::<f32>()?))
            .collect()
    }
}
