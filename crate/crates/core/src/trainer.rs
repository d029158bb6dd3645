//! Story training: precomputed scene features, conditioning dropout, the
//! two-phase learning rate, and checkpoints that resume bit-identically.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::backbone::unet::{LAYER_DOWNSCALE, NUM_ATTENTION_LAYERS};
use crate::backbone::{seeded_normal, Conditioning, Vae};
use crate::checkpoint::Manifest;
use crate::encoders::{rasterize_pose, Encoders, CHAR_TOKENS, ENC_DIM, FACE_DIM};
use crate::error::{Error, Result};
use crate::losses::{attention_loss, composite_loss_tensor, diffusion_loss, downsample_mask, report_from_tensors, LossReport, MaskTargets};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::device;
use crate::story::{StoryModel, OPTIMIZER_PREFIX};
use crate::synthdata::{generate_dataset, perturb_pose, Dataset, Scene, LATENT_FACTOR, NUM_KEYPOINTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub phase_boundary: usize,
    pub lambda: f64,
    pub caption_drop_prob: f64,
    pub character_drop_prob: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_interval: usize,
    /// Attention layers contributing to the attention loss.
    pub attn_loss_layers: Vec<usize>,
    pub dataset_size: usize,
    pub dataset_mix: f64,
    pub dataset_seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 4000,
            batch_size: 16,
            lr_phase1: 1e-4,
            lr_phase2: 5e-5,
            phase_boundary: 2000,
            lambda: crate::losses::DEFAULT_LAMBDA,
            caption_drop_prob: 0.10,
            character_drop_prob: 0.05,
            seed: 0,
            checkpoint_interval: 0,
            attn_loss_layers: (0..NUM_ATTENTION_LAYERS).collect(),
            dataset_size: 2048,
            dataset_mix: crate::synthdata::DEFAULT_MIX,
            dataset_seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be positive".into());
        }
        if self.phase_boundary > self.total_steps {
            return bad(format!("phase_boundary {} exceeds total_steps {}", self.phase_boundary, self.total_steps));
        }
        for (name, p) in [("caption_drop_prob", self.caption_drop_prob), ("character_drop_prob", self.character_drop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        for (name, v) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2), ("lambda", self.lambda)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.attn_loss_layers.is_empty() || self.attn_loss_layers.iter().any(|&l| l >= NUM_ATTENTION_LAYERS) {
            return bad(format!("attn_loss_layers must name layers in 0..{NUM_ATTENTION_LAYERS}"));
        }
        if self.dataset_size == 0 {
            return bad("dataset_size must be positive".into());
        }
        Ok(())
    }

    /// Reads a TOML or JSON file (by extension); missing fields take defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Two-phase piecewise-constant learning rate.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    if step < config.phase_boundary {
        config.lr_phase1
    } else {
        config.lr_phase2
    }
}

/// One training scene with everything the step needs precomputed.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub num_characters: usize,
    pub latent: Vec<f32>,
    /// `N × FACE_DIM` face embeddings of the reference crops.
    pub faces: Vec<f32>,
    /// `N × CHAR_TOKENS × ENC_DIM` character tokens of the reference crops.
    pub characters: Vec<f32>,
    /// `(T, TEXT_DIM)` caption features.
    pub text: Tensor,
    /// Per attention layer: the `N + 1` masks pooled to that layer's side.
    pub pooled_masks: Vec<Vec<f32>>,
    pub pose: Vec<f32>,
}

/// Salt for the pose seed of a scene's reference rendering.
const REFERENCE_POSE_SALT: u64 = 0x7265_6665_7265_6e63;

/// The same characters in a different pose, used as the reference for
/// `scene`. Falls back to the scene itself if every attempt occludes a face.
pub fn reference_scene(scene: &Scene) -> Result<Scene> {
    for k in 1..=4u64 {
        if let Ok(r) = perturb_pose(scene, scene.spec.pose_seed ^ REFERENCE_POSE_SALT.wrapping_mul(k)) {
            return Ok(r);
        }
    }
    Ok(scene.clone())
}

#[derive(Debug)]
pub struct TrainData {
    pub examples: Vec<TrainExample>,
    /// Features of the all-pad caption.
    pub null_text: Tensor,
    pub latent_shape: [usize; 3],
    /// Side of each attention layer.
    pub layer_sides: [usize; NUM_ATTENTION_LAYERS],
}

impl TrainData {
    pub fn build(dataset: &Dataset, encoders: &Encoders, vae: &Vae) -> Result<Self> {
        let scenes = (0..dataset.len()).map(|i| dataset.scene(i)).collect::<Result<Vec<_>>>()?;
        Self::from_scenes(&scenes, encoders, vae)
    }

    pub fn from_scenes(scenes: &[Scene], encoders: &Encoders, vae: &Vae) -> Result<Self> {
        let size = scenes.first().ok_or_else(|| Error::invalid("empty dataset"))?.canvas_size();
        if scenes.iter().any(|s| s.canvas_size() != size) {
            return Err(Error::invalid("training scenes must share one canvas size"));
        }
        let side = size / LATENT_FACTOR;
        if side % LAYER_DOWNSCALE[0] != 0 {
            return Err(Error::invalid(format!("latent side {side} does not reach every attention layer")));
        }
        let layer_sides = LAYER_DOWNSCALE.map(|d| side / d);
        let latents = vae.encode_images(&scenes.iter().map(|s| s.image.as_slice()).collect::<Vec<_>>(), size, 64)?;
        let mut examples = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(64) {
            let refs = chunk.iter().map(reference_scene).collect::<Result<Vec<_>>>()?;
            let chars: Vec<_> = refs.iter().flat_map(|r| r.characters.iter()).collect();
            let (faces, tokens) = StoryModel::reference_features(encoders, &chars)?;
            let faces = faces.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            let tokens = tokens.to_dtype(DType::F32)?.flatten_from(1)?.to_vec2::<f32>()?;
            let text = encoders.text.encode_batch(&chunk.iter().map(|s| s.caption.as_slice()).collect::<Vec<_>>())?;
            let mut c = 0;
            for (i, scene) in chunk.iter().enumerate() {
                let n = scene.num_characters();
                let pooled_masks = layer_sides
                    .iter()
                    .map(|&res| {
                        scene
                            .masks
                            .iter()
                            .map(|m| downsample_mask(m, size, res))
                            .collect::<Result<Vec<_>>>()
                            .map(|v| v.concat())
                    })
                    .collect::<Result<Vec<_>>>()?;
                examples.push(TrainExample {
                    num_characters: n,
                    latent: latents[examples.len()].clone(),
                    faces: faces[c..c + n].concat(),
                    characters: tokens[c..c + n].concat(),
                    text: text.get(i)?,
                    pooled_masks,
                    pose: rasterize_pose(&scene.pose, side * 4),
                });
                c += n;
            }
        }
        Ok(Self {
            examples,
            null_text: encoders.text.encode_batch(&[&[]])?.squeeze(0)?,
            latent_shape: [vae_channels(&latents[0], side)?, side, side],
            layer_sides,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn vae_channels(latent: &[f32], side: usize) -> Result<usize> {
    if latent.len() % (side * side) != 0 {
        return Err(Error::shape("latent size is not a whole number of channels"));
    }
    Ok(latent.len() / (side * side))
}

/// Builds the training dataset described by `config` and precomputes it.
pub fn prepare_data(config: &TrainConfig, encoders: &Encoders, vae: &Vae) -> Result<TrainData> {
    let ds = generate_dataset(config.dataset_size, config.dataset_mix, config.dataset_seed)?;
    TrainData::build(&ds, encoders, vae)
}

/// Per-scene random choices of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneDraw {
    pub index: usize,
    pub drop_caption: bool,
    pub drop_character: bool,
    pub timestep: usize,
}

/// Training state: model, optimizer moments, RNG position and step count.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: StoryModel,
    pub data: Arc<TrainData>,
    opt: AdamW,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: StoryModel, data: Arc<TrainData>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("no training data"));
        }
        model.check_partition()?;
        let opt = AdamW::new(model.store.trainable_vars(), config.optimizer)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            model,
            data,
            opt,
            rng,
            step: 0,
        })
    }

    /// Names of the parameters the optimizer updates.
    pub fn optimized_names(&self) -> Vec<String> {
        self.opt.names().map(String::from).collect()
    }

    /// Draws a batch: indices, dropout decisions and timesteps.
    pub fn draw_batch(&mut self) -> Vec<SceneDraw> {
        let t_max = self.model.schedule.steps();
        (0..self.config.batch_size)
            .map(|_| SceneDraw {
                index: self.rng.random_range(0..self.data.len()),
                drop_caption: self.rng.random_bool(self.config.caption_drop_prob),
                drop_character: self.rng.random_bool(self.config.character_drop_prob),
                timestep: self.rng.random_range(0..t_max),
            })
            .collect()
    }

    pub fn train_step(&mut self) -> Result<LossReport> {
        let draws = self.draw_batch();
        self.train_on(&draws)
    }

    /// One optimizer step on the given draws. Noise comes from the trainer's
    /// RNG, after any draws made by [`Trainer::draw_batch`].
    pub fn train_on(&mut self, draws: &[SceneDraw]) -> Result<LossReport> {
        if draws.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let data = Arc::clone(&self.data);
        let ex: Vec<&TrainExample> = draws
            .iter()
            .map(|d| data.examples.get(d.index).ok_or_else(|| Error::invalid(format!("example {} out of range", d.index))))
            .collect::<Result<_>>()?;
        let b = ex.len();
        let [c, h, w] = data.latent_shape;
        let dev = device();

        let z0 = Tensor::from_vec(ex.iter().flat_map(|e| e.latent.iter().copied()).collect::<Vec<_>>(), (b, c, h, w), &dev)?;
        let noise = seeded_normal(&[b, c, h, w], &mut self.rng, DType::F32)?;
        let ts: Vec<usize> = draws.iter().map(|d| d.timestep).collect();
        let zt = self.model.schedule.add_noise(&z0, &ts, &noise)?;

        let texts = ex
            .iter()
            .zip(draws)
            .map(|(e, d)| if d.drop_caption { data.null_text.clone() } else { e.text.clone() })
            .collect::<Vec<_>>();
        let text = Tensor::stack(&texts, 0)?;
        let counts: Vec<usize> = ex.iter().map(|e| e.num_characters).collect();
        let total_chars: usize = counts.iter().sum();
        let faces = Tensor::from_vec(ex.iter().flat_map(|e| e.faces.iter().copied()).collect::<Vec<_>>(), (total_chars, FACE_DIM), &dev)?;
        let chars = Tensor::from_vec(
            ex.iter().flat_map(|e| e.characters.iter().copied()).collect::<Vec<_>>(),
            (total_chars, CHAR_TOKENS, ENC_DIM),
            &dev,
        )?;
        let zero_char: Vec<bool> = draws.iter().map(|d| d.drop_character).collect();
        let image = self.model.ppr.build_batch(&faces, &chars, &counts, &zero_char)?;
        let pose = Tensor::from_vec(
            ex.iter().flat_map(|e| e.pose.iter().copied()).collect::<Vec<_>>(),
            (b, NUM_KEYPOINTS, 4 * h, 4 * w),
            &dev,
        )?;
        let cond = Conditioning {
            text: &text,
            image: Some(&image),
            pose: Some(&pose),
        };
        let (eps, records) = self.model.denoiser.predict_noise(&zt, &ts, cond, true)?;
        let l_sd = diffusion_loss(&noise, &eps)?;
        let regions = image.max_regions();
        let mut l_attn = Vec::with_capacity(self.config.attn_loss_layers.len());
        for &layer in &self.config.attn_loss_layers {
            let rec = records
                .iter()
                .find(|r| r.layer == layer)
                .ok_or_else(|| Error::invalid(format!("no attention record for layer {layer}")))?;
            let pooled: Vec<&[f32]> = ex.iter().map(|e| e.pooled_masks[layer].as_slice()).collect();
            let targets = MaskTargets::from_pooled(&pooled, rec.height, regions, DType::F32)?;
            l_attn.push(attention_loss(&rec.maps, &targets)?);
        }
        let total = composite_loss_tensor(&l_sd, &l_attn, self.config.lambda)?;
        let report = report_from_tensors(&l_sd, &l_attn, self.config.lambda)?;
        let grads = total.backward()?;
        self.opt.step(&grads, lr_at(self.step, &self.config))?;
        self.step += 1;
        Ok(report)
    }

    /// Trains until `config.total_steps`, appending one CSV row per step to
    /// `log` and saving periodic checkpoints under `checkpoint_dir`.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>, checkpoint_dir: Option<&Path>) -> Result<Vec<LossReport>> {
        let mut reports = Vec::with_capacity(self.config.total_steps.saturating_sub(self.step));
        while self.step < self.config.total_steps {
            let lr = lr_at(self.step, &self.config);
            let r = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                write_csv_row(w, self.step, &r, lr)?;
            }
            if self.step % 100 == 0 || self.step == self.config.total_steps {
                info!(step = self.step, l_sd = r.l_sd, l_attn = r.l_attn_mean, total = r.total, "train");
            }
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_interval;
                if every > 0 && self.step % every == 0 {
                    self.save_checkpoint(&dir.join(format!("step_{:06}", self.step)))?;
                }
            }
            reports.push(r);
        }
        Ok(reports)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<Manifest> {
        let meta = serde_json::json!({
            "train": {
                "config": self.config,
                "step": self.step,
                "rng_word_pos": self.rng.get_word_pos().to_string(),
            }
        });
        self.model.save(dir, meta, &self.opt.state_tensors())
    }

    /// Restores a training checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(dir: &Path, data: Arc<TrainData>) -> Result<Self> {
        let (manifest, values) = crate::checkpoint::load(dir)?;
        let (model, _) = StoryModel::load(dir)?;
        let train = &manifest.meta["train"];
        let config: TrainConfig =
            serde_json::from_value(train["config"].clone()).map_err(|e| Error::checkpoint(dir, format!("bad train config: {e}")))?;
        let step = train["step"].as_u64().ok_or_else(|| Error::checkpoint(dir, "missing step"))? as usize;
        let word_pos: u128 = train["rng_word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::checkpoint(dir, "missing rng position"))?;
        let mut trainer = Self::new(config, model, data)?;
        let opt_state: BTreeMap<String, Tensor> = values.into_iter().filter(|(n, _)| n.starts_with(OPTIMIZER_PREFIX)).collect();
        trainer.opt.load_state(&opt_state, step).map_err(|e| Error::checkpoint(dir, e.to_string()))?;
        trainer.rng.set_word_pos(word_pos);
        trainer.step = step;
        Ok(trainer)
    }
}

pub const CSV_HEADER: &str = "step,l_sd,l_attn_mean,total,lr";

pub fn write_csv_row(w: &mut dyn Write, step: usize, r: &LossReport, lr: f64) -> Result<()> {
    writeln!(w, "{step},{},{},{},{lr}", r.l_sd, r.l_attn_mean, r.total)?;
    Ok(())
}
