//! Frozen toy encoders: face embedding, character patch tokens, caption
//! features, and the pose rasterizer.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, LayerNorm, Linear};
use crate::params::{device, Init, ParamStore, Scope};
use crate::synthdata::palette::{MAX_CAPTION_LEN, PAD_TOKEN, VOCAB_SIZE};
use crate::synthdata::{ImagePatch, Point, PoseMap, NUM_KEYPOINTS};

pub const FACE_DIM: usize = 64;
pub const ENC_DIM: usize = 64;
pub const FACE_INPUT: usize = 16;
pub const BODY_INPUT: usize = 32;
pub const CHAR_GRID: usize = 4;
pub const CHAR_TOKENS: usize = CHAR_GRID * CHAR_GRID;
pub const TEXT_DIM: usize = 64;
/// Resolution of the pose raster fed to the pose branch.
pub const POSE_RESOLUTION: usize = 32;
/// Keypoint disc radius, in canvas pixels.
pub const POSE_DISC_RADIUS: f32 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Face,
    Character,
    Text,
    Fused,
}

/// A `(tokens × dim)` feature matrix, or a batch `(B × tokens × dim)` of them.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub tokens: Tensor,
    pub role: Role,
}

impl FeatureSequence {
    pub fn new(tokens: Tensor, role: Role) -> Result<Self> {
        let dims = tokens.dims();
        if dims.len() < 2 || dims[dims.len() - 2] == 0 {
            return Err(Error::shape(format!("feature sequence needs at least one token, got {dims:?}")));
        }
        Ok(Self { tokens, role })
    }

    pub fn num_tokens(&self) -> usize {
        let d = self.tokens.dims();
        d[d.len() - 2]
    }

    pub fn dim(&self) -> usize {
        *self.tokens.dims().last().unwrap()
    }
}

/// Caption features plus which positions hold real tokens. Pad positions
/// carry the pad embedding and stay attendable, so an all-pad caption is a
/// well-defined null prompt.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub features: FeatureSequence,
    pub valid: Vec<bool>,
}

/// Stacks patches into a `(B, 3, size, size)` tensor, resizing as needed.
pub fn patches_to_tensor(patches: &[&ImagePatch], size: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(patches.len() * 3 * size * size);
    for p in patches {
        if p.width == 0 || p.height == 0 {
            return Err(Error::invalid("empty image patch"));
        }
        if p.width == size && p.height == size {
            data.extend_from_slice(&p.data);
        } else {
            data.extend_from_slice(&p.resize(size, size).data);
        }
    }
    Ok(Tensor::from_vec(data, (patches.len(), 3, size, size), &device())?.to_dtype(dtype)?)
}

fn check_nonblank(patches: &[&ImagePatch], what: &str) -> Result<()> {
    if patches.iter().any(|p| p.width == 0 || p.height == 0 || p.is_blank()) {
        return Err(Error::invalid(format!("empty {what} region")));
    }
    Ok(())
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Small conv net: 16×16 face crop to a unit-norm 64-vector.
#[derive(Debug, Clone)]
pub struct FaceEncoder {
    convs: Vec<Conv2d>,
    head: Linear,
}

impl FaceEncoder {
    pub fn new(s: &mut Scope) -> Result<Self> {
        let convs = vec![
            Conv2d::new(&mut s.pp("conv1"), 3, 32, 3, 1)?,
            Conv2d::new(&mut s.pp("conv2"), 32, 64, 3, 2)?,
            Conv2d::new(&mut s.pp("conv3"), 64, 64, 3, 2)?,
        ];
        Ok(Self {
            convs,
            head: Linear::new(&mut s.pp("head"), 64, FACE_DIM, true)?,
        })
    }

    /// `(B, 3, 16, 16)` → `(B, FACE_DIM)`, unit norm per row.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.silu()?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        l2_normalize(&self.head.forward(&pooled)?)
    }

    pub fn encode(&self, crops: &[&ImagePatch]) -> Result<Tensor> {
        check_nonblank(crops, "face")?;
        let x = patches_to_tensor(crops, FACE_INPUT, self.head.weight.dtype())?;
        self.forward(&x)
    }
}

/// Conv net producing a 4×4 grid of patch tokens from a 32×32 body crop.
#[derive(Debug, Clone)]
pub struct CharacterEncoder {
    convs: Vec<Conv2d>,
    norm: LayerNorm,
}

impl CharacterEncoder {
    pub fn new(s: &mut Scope) -> Result<Self> {
        let convs = vec![
            Conv2d::new(&mut s.pp("conv1"), 3, 32, 3, 1)?,
            Conv2d::new(&mut s.pp("conv2"), 32, 64, 3, 2)?,
            Conv2d::new(&mut s.pp("conv3"), 64, 64, 3, 2)?,
            Conv2d::new(&mut s.pp("conv4"), 64, ENC_DIM, 3, 2)?,
        ];
        Ok(Self {
            convs,
            norm: LayerNorm::new(&mut s.pp("norm"), ENC_DIM)?,
        })
    }

    /// `(B, 3, 32, 32)` → `(B, 16, ENC_DIM)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if i < last {
                h = h.silu()?;
            }
        }
        let (b, c, gh, gw) = h.dims4()?;
        let tokens = h.reshape((b, c, gh * gw))?.transpose(1, 2)?.contiguous()?;
        self.norm.forward(&tokens)
    }

    pub fn encode(&self, crops: &[&ImagePatch]) -> Result<FeatureSequence> {
        check_nonblank(crops, "character")?;
        let x = patches_to_tensor(crops, BODY_INPUT, self.norm_dtype())?;
        FeatureSequence::new(self.forward(&x)?, Role::Character)
    }

    fn norm_dtype(&self) -> DType {
        self.convs[0].weight.dtype()
    }
}

/// Token embedding, learned positions and one pre-norm self-attention mixer.
/// Random and frozen; the diffusion model learns to read it.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    embed: Tensor,
    pos: Tensor,
    norm1: LayerNorm,
    qkv: Linear,
    out: Linear,
    norm2: LayerNorm,
}

impl TextEncoder {
    pub fn new(s: &mut Scope) -> Result<Self> {
        Ok(Self {
            embed: s.get("embed", (VOCAB_SIZE, TEXT_DIM), Init::Normal { std: 1.0 })?,
            pos: s.get("pos", (MAX_CAPTION_LEN, TEXT_DIM), Init::Normal { std: 0.3 })?,
            norm1: LayerNorm::new(&mut s.pp("norm1"), TEXT_DIM)?,
            qkv: Linear::new(&mut s.pp("qkv"), TEXT_DIM, 3 * TEXT_DIM, false)?,
            out: Linear::new(&mut s.pp("out"), TEXT_DIM, TEXT_DIM, false)?,
            norm2: LayerNorm::new(&mut s.pp("norm2"), TEXT_DIM)?,
        })
    }

    pub fn pad(tokens: &[u32]) -> Result<Vec<u32>> {
        if tokens.len() > MAX_CAPTION_LEN {
            return Err(Error::invalid(format!(
                "caption of {} tokens exceeds {MAX_CAPTION_LEN}",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {VOCAB_SIZE}")));
        }
        let mut out = tokens.to_vec();
        out.resize(MAX_CAPTION_LEN, PAD_TOKEN);
        Ok(out)
    }

    /// Encodes a batch of captions to `(B, MAX_CAPTION_LEN, TEXT_DIM)`.
    pub fn encode_batch(&self, captions: &[&[u32]]) -> Result<Tensor> {
        let mut ids = Vec::with_capacity(captions.len() * MAX_CAPTION_LEN);
        for c in captions {
            ids.extend(Self::pad(c)?);
        }
        let b = captions.len();
        let idx = Tensor::from_vec(ids, b * MAX_CAPTION_LEN, &device())?;
        let x = self
            .embed
            .index_select(&idx, 0)?
            .reshape((b, MAX_CAPTION_LEN, TEXT_DIM))?
            .broadcast_add(&self.pos)?;
        let h = self.norm1.forward(&x)?;
        let qkv = self.qkv.forward(&h)?;
        let q = qkv.narrow(2, 0, TEXT_DIM)?.contiguous()?;
        let k = qkv.narrow(2, TEXT_DIM, TEXT_DIM)?.contiguous()?;
        let v = qkv.narrow(2, 2 * TEXT_DIM, TEXT_DIM)?.contiguous()?;
        let logits = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (TEXT_DIM as f64).sqrt())?;
        let mixed = nn::softmax_last(&logits)?.matmul(&v)?;
        let x = (x + self.out.forward(&mixed)?)?;
        self.norm2.forward(&x)
    }

    pub fn encode(&self, caption: &[u32]) -> Result<TextFeatures> {
        let padded = Self::pad(caption)?;
        let t = self.encode_batch(&[caption])?.squeeze(0)?;
        Ok(TextFeatures {
            features: FeatureSequence::new(t, Role::Text)?,
            valid: padded.iter().enumerate().map(|(i, _)| i < caption.len()).collect(),
        })
    }
}

/// The three frozen encoders, loaded together.
#[derive(Debug)]
pub struct Encoders {
    pub face: FaceEncoder,
    pub character: CharacterEncoder,
    pub text: TextEncoder,
    pub store: ParamStore,
}

impl Encoders {
    /// Builds the encoders from `store`; parameters missing from it are
    /// freshly initialized.
    pub fn from_store(mut store: ParamStore) -> Result<Self> {
        let mut root = store.root();
        let face = FaceEncoder::new(&mut root.pp("face"))?;
        let character = CharacterEncoder::new(&mut root.pp("character"))?;
        let text = TextEncoder::new(&mut root.pp("text"))?;
        Ok(Self {
            face,
            character,
            text,
            store,
        })
    }

    pub fn random(seed: u64) -> Result<Self> {
        Self::from_store(ParamStore::new(DType::F32, seed))
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let (manifest, values) = crate::checkpoint::load(dir)?;
        if manifest.kind != "encoders" {
            return Err(Error::checkpoint(dir, format!("expected an encoders checkpoint, found {:?}", manifest.kind)));
        }
        let enc = Self::from_store(ParamStore::with_values(DType::F32, 0, values))?;
        let unused = enc.store.unused_values();
        if !unused.is_empty() {
            return Err(Error::checkpoint(dir, format!("unexpected tensors: {unused:?}")));
        }
        Ok(enc)
    }

    pub fn save(&self, dir: &std::path::Path, meta: serde_json::Value) -> Result<()> {
        crate::checkpoint::save(dir, "encoders", meta, &self.store.named_tensors())?;
        Ok(())
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum(|_| true)
    }

    pub fn encode_face(&self, crop: &ImagePatch) -> Result<Tensor> {
        self.face.encode(&[crop])?.squeeze(0).map_err(Into::into)
    }

    pub fn encode_character(&self, crop: &ImagePatch) -> Result<FeatureSequence> {
        let f = self.character.encode(&[crop])?;
        FeatureSequence::new(f.tokens.squeeze(0)?, Role::Character)
    }

    pub fn encode_text(&self, caption: &[u32]) -> Result<TextFeatures> {
        self.text.encode(caption)
    }
}

/// Rasterizes `(channel, point)` pairs, given in canvas pixels, to a
/// `channels × res × res` map of unit discs.
pub fn rasterize_points(points: &[(usize, Point)], canvas_size: usize, resolution: usize, channels: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; channels * resolution * resolution];
    let scale = resolution as f32 / canvas_size as f32;
    let r = (POSE_DISC_RADIUS * scale).max(0.75);
    for &(ch, p) in points {
        if ch >= channels {
            continue;
        }
        let (cx, cy) = (p.x * scale, p.y * scale);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let x0 = (cx - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize + 1).min(resolution);
        let x1 = ((cx + r).ceil() as usize + 1).min(resolution);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    out[ch * resolution * resolution + y * resolution + x] = 1.0;
                }
            }
        }
    }
    out
}

/// One channel per keypoint type; all characters share the channels.
pub fn rasterize_pose(pose: &PoseMap, resolution: usize) -> Vec<f32> {
    let points: Vec<(usize, Point)> = pose
        .characters
        .iter()
        .flat_map(|kp| kp.iter().copied().enumerate())
        .collect();
    rasterize_points(&points, pose.canvas_size, resolution, NUM_KEYPOINTS)
}

pub fn pose_tensor(poses: &[&PoseMap], resolution: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(poses.len() * NUM_KEYPOINTS * resolution * resolution);
    for p in poses {
        data.extend(rasterize_pose(p, resolution));
    }
    Ok(Tensor::from_vec(data, (poses.len(), NUM_KEYPOINTS, resolution, resolution), &device())?.to_dtype(dtype)?)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}
