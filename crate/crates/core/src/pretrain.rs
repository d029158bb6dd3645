//! Pretraining for the components that stay frozen during story training:
//! the face/character encoders, the VAE and the text-conditioned base U-Net.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::backbone::{images_to_tensor, seeded_normal, Denoiser, NoiseSchedule, UNet, UNetConfig, Vae, VaeMeta};
use crate::encoders::{cosine, Encoders, BODY_INPUT, FACE_INPUT};
use crate::error::{Error, Result};
use crate::losses::diffusion_loss;
use crate::nn::scalar_f64;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{device, Init, ParamStore};
use crate::synthdata::palette::{NUM_BACKGROUNDS, NUM_CLOTHING, NUM_IDENTITIES, TRAIN_IDENTITIES};
use crate::synthdata::{generate_dataset, generate_dataset_with_identities, generate_scene, Scene, SceneSpec, DEFAULT_MIX};

/// Softmax cross-entropy of `logits (B, C)` against class indices.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, _) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} rows", labels.len())));
    }
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let idx = Tensor::from_vec(labels.to_vec(), (b, 1), &device())?;
    let picked = shifted.gather(&idx, 1)?;
    Ok((lse - picked)?.mean_all()?)
}

fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Scaled cosine logits of unit embeddings against class prototypes.
fn cosine_logits(emb: &Tensor, classes: &Tensor, scale: f64) -> Result<Tensor> {
    Ok((emb.matmul(&normalize_rows(classes)?.t()?)? * scale)?)
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

/// Photometric and geometric jitter for a CHW patch: gain, offset, a
/// one-pixel shift, optional 3×3 box blur and pixel noise.
pub fn augment(data: &[f32], size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gain: f32 = rng.random_range(0.85..1.15);
    let offset: f32 = rng.random_range(-0.05..0.05);
    let dx: i32 = rng.random_range(-1..=1);
    let dy: i32 = rng.random_range(-1..=1);
    let blur = rng.random_bool(0.5);
    let s = size as i32;
    let at = |c: usize, y: i32, x: i32| data[c * size * size + (y.clamp(0, s - 1) * s + x.clamp(0, s - 1)) as usize];
    let mut out = vec![0f32; data.len()];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = (y + dy, x + dx);
                let v = if blur {
                    let mut acc = 0.0;
                    for oy in -1..=1 {
                        for ox in -1..=1 {
                            acc += at(c, sy + oy, sx + ox);
                        }
                    }
                    acc / 9.0
                } else {
                    at(c, sy, sx)
                };
                let noise: f64 = StandardNormal.sample(rng);
                out[c * size * size + (y * s + x) as usize] = (v * gain + offset + 0.03 * noise as f32).clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scenes: usize,
    pub seed: u64,
}

impl Default for EncoderPretrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 64,
            lr: 2e-3,
            scenes: 1500,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub face_loss: f64,
    pub character_loss: f64,
    /// Mean same-identity minus mean cross-identity cosine on held-out identities.
    pub face_margin: f64,
    pub character_margin: f64,
}

struct CropSample {
    face: Vec<f32>,
    body: Vec<f32>,
    identity: u32,
    clothing: u32,
}

fn crop_samples(scenes: &[Scene]) -> Vec<CropSample> {
    scenes
        .iter()
        .flat_map(|s| s.characters.iter())
        .map(|c| CropSample {
            face: c.face_crop.resize(FACE_INPUT, FACE_INPUT).data,
            body: c.body_crop.resize(BODY_INPUT, BODY_INPUT).data,
            identity: c.identity_id,
            clothing: c.clothing_id,
        })
        .collect()
}

fn render_all(specs: impl Iterator<Item = (SceneSpec, u64)>) -> Result<Vec<Scene>> {
    specs.map(|(spec, seed)| generate_scene(&spec, seed)).collect()
}

/// Trains the face encoder to separate identities and the character encoder
/// to separate identity and clothing, both with cosine-softmax heads that
/// are discarded afterwards. The text encoder stays at its random init.
pub fn pretrain_encoders(cfg: &EncoderPretrainConfig) -> Result<(Encoders, EncoderReport)> {
    let all_ids: Vec<u32> = (0..NUM_IDENTITIES).collect();
    let ds = generate_dataset_with_identities(cfg.scenes, DEFAULT_MIX, cfg.seed, &all_ids)?;
    let scenes = render_all(ds.entries.iter().map(|e| (e.spec.clone(), e.seed)))?;
    let samples = crop_samples(&scenes);

    let mut store = ParamStore::new(DType::F32, cfg.seed);
    store.set_trainable(|n| !n.starts_with("text."));
    let encoders = Encoders::from_store(store)?;
    let mut heads = ParamStore::new(DType::F32, cfg.seed ^ 0x6865_6164);
    heads.set_trainable(|_| true);
    let (face_cls, char_id, char_cloth) = {
        let mut r = heads.root();
        (
            r.get("face_identity", (NUM_IDENTITIES as usize, 64), Init::Normal { std: 1.0 })?,
            r.get("character_identity", (NUM_IDENTITIES as usize, 64), Init::Normal { std: 1.0 })?,
            r.get("character_clothing", (NUM_CLOTHING as usize, 64), Init::Normal { std: 1.0 })?,
        )
    };
    let mut vars = encoders.store.trainable_vars();
    vars.extend(heads.trainable_vars());
    let mut opt = AdamW::new(vars, AdamWConfig { weight_decay: 0.0, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x656e_636f);
    let (mut face_loss, mut char_loss) = (f64::NAN, f64::NAN);
    for step in 0..cfg.steps {
        let idx = sample_indices(&mut rng, samples.len(), cfg.batch_size);
        let faces: Vec<Vec<f32>> = idx.iter().map(|&i| augment(&samples[i].face, FACE_INPUT, &mut rng)).collect();
        let bodies: Vec<Vec<f32>> = idx.iter().map(|&i| augment(&samples[i].body, BODY_INPUT, &mut rng)).collect();
        let ids: Vec<u32> = idx.iter().map(|&i| samples[i].identity).collect();
        let cloth: Vec<u32> = idx.iter().map(|&i| samples[i].clothing).collect();
        let fx = images_to_tensor(&faces.iter().map(Vec::as_slice).collect::<Vec<_>>(), FACE_INPUT, DType::F32)?;
        let bx = images_to_tensor(&bodies.iter().map(Vec::as_slice).collect::<Vec<_>>(), BODY_INPUT, DType::F32)?;

        let fe = encoders.face.forward(&fx)?;
        let lf = cross_entropy(&cosine_logits(&fe, &face_cls, 10.0)?, &ids)?;
        let ce = normalize_rows(&encoders.character.forward(&bx)?.mean(1)?)?;
        let lc = (cross_entropy(&cosine_logits(&ce, &char_id, 10.0)?, &ids)?
            + cross_entropy(&cosine_logits(&ce, &char_cloth, 10.0)?, &cloth)?)?;
        let total = (&lf + &lc)?;
        opt.step(&total.backward()?, cfg.lr)?;
        face_loss = scalar_f64(&lf)?;
        char_loss = scalar_f64(&lc)?;
        if !face_loss.is_finite() || !char_loss.is_finite() {
            return Err(Error::non_finite("encoder pretraining loss"));
        }
        if step % 100 == 0 || step + 1 == cfg.steps {
            info!(step, face_loss, char_loss, "encoder pretraining");
        }
    }
    // Rebuild from plain values so nothing downstream holds trainable vars.
    let values: BTreeMap<String, Tensor> = encoders.store.named_tensors().into_iter().map(|(n, t)| (n, t.detach())).collect();
    let encoders = Encoders::from_store(ParamStore::with_values(DType::F32, 0, values))?;
    let (face_margin, character_margin) = separability_margin(&encoders, cfg.seed)?;
    Ok((
        encoders,
        EncoderReport {
            face_loss,
            character_loss: char_loss,
            face_margin,
            character_margin,
        },
    ))
}

/// Renders six poses of each held-out identity (clothing pinned per
/// identity) and returns the face and character-encoder margins: mean
/// cosine within an identity minus mean cosine across identities.
pub fn separability_margin(encoders: &Encoders, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_7267);
    let mut specs = Vec::new();
    for id in TRAIN_IDENTITIES..NUM_IDENTITIES {
        for _ in 0..6 {
            let spec = SceneSpec::new(vec![id], rng.random(), rng.random_range(0..NUM_BACKGROUNDS), 0).with_clothing(vec![id % NUM_CLOTHING]);
            specs.push((spec, rng.random()));
        }
    }
    let scenes = render_all(specs.into_iter())?;
    let refs: Vec<_> = scenes.iter().map(|s| &s.characters[0]).collect();
    let faces = encoders.face.encode(&refs.iter().map(|c| &c.face_crop).collect::<Vec<_>>())?;
    let chars = encoders.character.encode(&refs.iter().map(|c| &c.body_crop).collect::<Vec<_>>())?.tokens.mean(1)?;
    let ids: Vec<u32> = refs.iter().map(|c| c.identity_id).collect();
    Ok((margin(&faces, &ids)?, margin(&chars, &ids)?))
}

fn margin(emb: &Tensor, ids: &[u32]) -> Result<f64> {
    let rows = emb.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let c = cosine(&rows[i], &rows[j]);
            if ids[i] == ids[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    Ok(intra / ni.max(1) as f64 - inter / nx.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaePretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub scenes: usize,
    pub seed: u64,
}

impl Default for VaePretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            kl_weight: 1e-4,
            scenes: 1024,
            seed: 11,
        }
    }
}

fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse.max(1e-12)).log10()
}

/// Trains the VAE on rendered scenes with a reparameterized posterior
/// sample, then sets the latent scale so encoded training scenes have unit
/// standard deviation.
pub fn pretrain_vae(cfg: &VaePretrainConfig) -> Result<(Vae, VaeMeta)> {
    let all_ids: Vec<u32> = (0..NUM_IDENTITIES).collect();
    let ds = generate_dataset_with_identities(cfg.scenes, DEFAULT_MIX, cfg.seed, &all_ids)?;
    let scenes = render_all(ds.entries.iter().map(|e| (e.spec.clone(), e.seed)))?;
    let size = scenes[0].canvas_size();

    let mut store = ParamStore::new(DType::F32, cfg.seed);
    store.set_trainable(|_| true);
    let vae = Vae::from_store(store, 1.0)?;
    let mut opt = AdamW::new(vae.store.trainable_vars(), AdamWConfig { weight_decay: 0.0, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7661_65);
    for step in 0..cfg.steps {
        let idx = sample_indices(&mut rng, scenes.len(), cfg.batch_size);
        let x = images_to_tensor(&idx.iter().map(|&i| scenes[i].image.as_slice()).collect::<Vec<_>>(), size, DType::F32)?;
        let (mean, logvar) = vae.posterior(&x)?;
        let eps = seeded_normal(mean.dims(), &mut rng, DType::F32)?;
        let z = (&mean + (eps * (&logvar * 0.5)?.exp()?)?)?;
        let recon = diffusion_loss(&x, &vae.decode_raw(&z)?)?;
        let kl = (((mean.sqr()? + logvar.exp()?)? - 1.0)? - &logvar)?.mean_all()?;
        let total = (&recon + (kl * (0.5 * cfg.kl_weight))?)?;
        opt.step(&total.backward()?, cfg.lr)?;
        let r = scalar_f64(&recon)?;
        if !r.is_finite() {
            return Err(Error::non_finite("vae reconstruction loss"));
        }
        if step % 100 == 0 || step + 1 == cfg.steps {
            info!(step, recon = r, psnr = psnr(r), "vae pretraining");
        }
    }
    let values: BTreeMap<String, Tensor> = vae.store.named_tensors().into_iter().map(|(n, t)| (n, t.detach())).collect();
    let mut vae = Vae::from_store(ParamStore::with_values(DType::F32, 0, values), 1.0)?;

    let sample: Vec<&[f32]> = scenes.iter().take(256).map(|s| s.image.as_slice()).collect();
    let lat = vae.encode_images(&sample, size, 32)?;
    let flat: Vec<f64> = lat.iter().flatten().map(|&v| v as f64).collect();
    let mu = flat.iter().sum::<f64>() / flat.len() as f64;
    let std = (flat.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / flat.len() as f64).sqrt();
    vae.scale_factor = 1.0 / std.max(1e-6);

    let held = generate_dataset_with_identities(64, DEFAULT_MIX, cfg.seed ^ 0x6865_6c64, &all_ids)?;
    let held = render_all(held.entries.iter().map(|e| (e.spec.clone(), e.seed)))?;
    let x = images_to_tensor(&held.iter().map(|s| s.image.as_slice()).collect::<Vec<_>>(), size, DType::F32)?;
    let mse = scalar_f64(&diffusion_loss(&x, &vae.decode(&vae.encode(&x)?)?)?)?;
    let meta = VaeMeta {
        scale_factor: vae.scale_factor,
        psnr_db: psnr(mse),
    };
    info!(scale = meta.scale_factor, psnr = meta.psnr_db, "vae ready");
    Ok((vae, meta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasePretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub caption_drop_prob: f64,
    pub scenes: usize,
    pub seed: u64,
}

impl Default for BasePretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 16,
            lr: 1e-3,
            warmup: 100,
            caption_drop_prob: 0.1,
            scenes: 3000,
            seed: 13,
        }
    }
}

/// Text-conditioned base U-Net, the frozen backbone of story training.
#[derive(Debug)]
pub struct BaseModel {
    pub unet: UNet,
    pub store: ParamStore,
}

pub const BASE_PREFIX: &str = "unet";
pub const BASE_KIND: &str = "unet-base";

impl BaseModel {
    pub fn from_store(mut store: ParamStore) -> Result<Self> {
        let unet = UNet::new(&mut store.root().pp(BASE_PREFIX), UNetConfig::base())?;
        Ok(Self { unet, store })
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let (manifest, values) = crate::checkpoint::load(dir)?;
        if manifest.kind != BASE_KIND {
            return Err(Error::checkpoint(dir, format!("expected a unet-base checkpoint, found {:?}", manifest.kind)));
        }
        let model = Self::from_store(ParamStore::with_values(DType::F32, 0, values))?;
        let unused = model.store.unused_values();
        if !unused.is_empty() {
            return Err(Error::checkpoint(dir, format!("unexpected tensors: {unused:?}")));
        }
        Ok(model)
    }

    pub fn save(&self, dir: &std::path::Path, meta: serde_json::Value) -> Result<()> {
        crate::checkpoint::save(dir, BASE_KIND, meta, &self.store.named_tensors())?;
        Ok(())
    }

    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.store.named_tensors().into_iter().collect()
    }
}

/// Denoising pretraining of the base U-Net on training-identity scenes.
/// Returns the model and the mean loss over the final 100 steps.
pub fn pretrain_base(cfg: &BasePretrainConfig, encoders: &Encoders, vae: &Vae) -> Result<(BaseModel, f64)> {
    let ds = generate_dataset(cfg.scenes, DEFAULT_MIX, cfg.seed)?;
    let scenes = render_all(ds.entries.iter().map(|e| (e.spec.clone(), e.seed)))?;
    let size = scenes[0].canvas_size();
    let latents = vae.encode_images(&scenes.iter().map(|s| s.image.as_slice()).collect::<Vec<_>>(), size, 64)?;
    let lat_dims = vae.encode(&images_to_tensor(&[scenes[0].image.as_slice()], size, DType::F32)?)?.dims().to_vec();
    let text = encoders.text.encode_batch(&scenes.iter().map(|s| s.caption.as_slice()).collect::<Vec<_>>())?;
    let null_text = encoders.text.encode_batch(&[&[]])?.squeeze(0)?;

    let mut store = ParamStore::new(DType::F32, cfg.seed);
    store.set_trainable(|_| true);
    let model = BaseModel::from_store(store)?;
    let denoiser = Denoiser { unet: model.unet.clone(), pose: None };
    let schedule = NoiseSchedule::default();
    let mut opt = AdamW::new(model.store.trainable_vars(), AdamWConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7365);
    let mut tail = Vec::new();
    for step in 0..cfg.steps {
        let idx = sample_indices(&mut rng, scenes.len(), cfg.batch_size);
        let b = idx.len();
        let mut z0 = Vec::with_capacity(b * latents[0].len());
        let mut texts = Vec::with_capacity(b);
        let mut ts = Vec::with_capacity(b);
        for &i in &idx {
            z0.extend_from_slice(&latents[i]);
            texts.push(if rng.random_bool(cfg.caption_drop_prob) { null_text.clone() } else { text.get(i)? });
            ts.push(rng.random_range(0..schedule.steps()));
        }
        let mut shape = lat_dims.clone();
        shape[0] = b;
        let z0 = Tensor::from_vec(z0, shape.as_slice(), &device())?;
        let noise = seeded_normal(&shape, &mut rng, DType::F32)?;
        let zt = schedule.add_noise(&z0, &ts, &noise)?;
        let text_b = Tensor::stack(&texts, 0)?;
        let cond = crate::backbone::Conditioning { text: &text_b, image: None, pose: None };
        let (eps, _) = denoiser.predict_noise(&zt, &ts, cond, false)?;
        let loss = diffusion_loss(&noise, &eps)?;
        let lr = cfg.lr * ((step + 1) as f64 / cfg.warmup.max(1) as f64).min(1.0);
        opt.step(&loss.backward()?, lr)?;
        let l = scalar_f64(&loss)?;
        if !l.is_finite() {
            return Err(Error::non_finite("base pretraining loss"));
        }
        if step + 100 >= cfg.steps {
            tail.push(l);
        }
        if step % 100 == 0 || step + 1 == cfg.steps {
            info!(step, loss = l, "base pretraining");
        }
    }
    let values: BTreeMap<String, Tensor> = model.values().into_iter().map(|(n, t)| (n, t.detach())).collect();
    let model = BaseModel::from_store(ParamStore::with_values(DType::F32, 0, values))?;
    Ok((model, tail.iter().sum::<f64>() / tail.len().max(1) as f64))
}
