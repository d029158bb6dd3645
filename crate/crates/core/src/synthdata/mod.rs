//! Procedural character scenes with ground-truth masks, poses and captions.
//!
//! A scene is a pure function of `(SceneSpec, seed)`. The spec fixes who is
//! in the picture, how they stand (`pose_seed`), the background and the
//! caption template; the seed picks clothing (unless pinned) and the
//! background texture.

pub mod io;
pub mod palette;
mod render;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use palette::{NUM_ACTIONS, NUM_BACKGROUNDS, NUM_CLOTHING, NUM_IDENTITIES, NUM_TEMPLATES, TRAIN_IDENTITIES};
use render::{Canvas, Part};

pub use render::HEAD_RADIUS;

pub const CANVAS_SIZE: usize = 64;
pub const LATENT_FACTOR: usize = 8;
pub const MAX_CHARACTERS: usize = 2;

pub const NUM_KEYPOINTS: usize = 7;
pub const KP_HEAD: usize = 0;
pub const KP_NECK: usize = 1;
pub const KP_LEFT_HAND: usize = 2;
pub const KP_RIGHT_HAND: usize = 3;
pub const KP_HIP: usize = 4;
pub const KP_LEFT_FOOT: usize = 5;
pub const KP_RIGHT_FOOT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }
}

pub type Keypoints = [Point; NUM_KEYPOINTS];

/// Keypoints of every character in a scene, in canvas pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMap {
    pub canvas_size: usize,
    pub characters: Vec<Keypoints>,
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, other: &Rect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

/// A CHW float image patch with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImagePatch {
    pub fn is_blank(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Bilinear resize (align-corners=false), used to feed fixed-size encoders.
    pub fn resize(&self, width: usize, height: usize) -> ImagePatch {
        let mut data = vec![0.0; 3 * width * height];
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for c in 0..3 {
            let src = &self.data[c * self.width * self.height..(c + 1) * self.width * self.height];
            for y in 0..height {
                let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
                let (y0, wy) = (fy.floor() as usize, fy - fy.floor());
                let y1 = (y0 + 1).min(self.height - 1);
                for x in 0..width {
                    let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                    let (x0, wx) = (fx.floor() as usize, fx - fx.floor());
                    let x1 = (x0 + 1).min(self.width - 1);
                    let top = src[y0 * self.width + x0] * (1.0 - wx) + src[y0 * self.width + x1] * wx;
                    let bot = src[y1 * self.width + x0] * (1.0 - wx) + src[y1 * self.width + x1] * wx;
                    data[c * width * height + y * width + x] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        ImagePatch { width, height, data }
    }
}

/// Cuts `rect` out of a CHW canvas image, zeroing pixels where `keep` is false.
pub fn crop(image: &[f32], size: usize, rect: Rect, keep: impl Fn(usize) -> bool) -> ImagePatch {
    let (w, h) = (rect.width(), rect.height());
    let mut data = vec![0.0; 3 * w * h];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let i = (rect.y0 + y) * size + rect.x0 + x;
                if keep(i) {
                    data[c * w * h + y * w + x] = image[c * size * size + i];
                }
            }
        }
    }
    ImagePatch { width: w, height: h, data }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_characters: usize,
    pub canvas_size: usize,
    pub identity_ids: Vec<u32>,
    pub pose_seed: u64,
    pub background_id: u32,
    pub caption_template_id: u32,
    /// Pins each character's clothing; when absent it is drawn from the scene seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clothing_ids: Option<Vec<u32>>,
}

impl SceneSpec {
    pub fn new(identity_ids: Vec<u32>, pose_seed: u64, background_id: u32, caption_template_id: u32) -> Self {
        Self {
            num_characters: identity_ids.len(),
            canvas_size: CANVAS_SIZE,
            identity_ids,
            pose_seed,
            background_id,
            caption_template_id,
            clothing_ids: None,
        }
    }

    pub fn with_clothing(mut self, clothing: Vec<u32>) -> Self {
        self.clothing_ids = Some(clothing);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_CHARACTERS).contains(&self.num_characters) {
            return Err(Error::invalid(format!(
                "num_characters must be 1 or 2, got {}",
                self.num_characters
            )));
        }
        if self.identity_ids.len() != self.num_characters {
            return Err(Error::invalid(format!(
                "{} identity ids for {} characters",
                self.identity_ids.len(),
                self.num_characters
            )));
        }
        if self.canvas_size == 0 || self.canvas_size % LATENT_FACTOR != 0 {
            return Err(Error::invalid(format!(
                "canvas size {} is not a positive multiple of {LATENT_FACTOR}",
                self.canvas_size
            )));
        }
        if self.canvas_size < 32 {
            return Err(Error::invalid("canvas must be at least 32 pixels"));
        }
        if let Some(&id) = self.identity_ids.iter().find(|&&i| i >= NUM_IDENTITIES) {
            return Err(Error::invalid(format!("identity {id} outside palette of {NUM_IDENTITIES}")));
        }
        if let Some(c) = &self.clothing_ids {
            if c.len() != self.num_characters || c.iter().any(|&x| x >= NUM_CLOTHING) {
                return Err(Error::invalid("clothing ids must match characters and lie in the palette"));
            }
        }
        if self.background_id >= NUM_BACKGROUNDS {
            return Err(Error::invalid(format!("background {} outside palette", self.background_id)));
        }
        if self.caption_template_id >= NUM_TEMPLATES {
            return Err(Error::invalid(format!("caption template {} unknown", self.caption_template_id)));
        }
        Ok(())
    }

    /// The action implied by the pose seed (shared by all characters).
    pub fn action(&self) -> u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.pose_seed ^ 0x6163_7469_6f6e);
        rng.random_range(0..NUM_ACTIONS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterReference {
    pub slot: usize,
    pub identity_id: u32,
    pub clothing_id: u32,
    pub face_rect: Rect,
    pub body_rect: Rect,
    pub face_crop: ImagePatch,
    pub body_crop: ImagePatch,
    /// Canvas-resolution binary mask.
    pub mask: Vec<u8>,
    pub keypoints: Keypoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub seed: u64,
    /// CHW, `3 × canvas × canvas`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `N + 1` binary maps; index 0 is the background.
    pub masks: Vec<Vec<u8>>,
    pub characters: Vec<CharacterReference>,
    pub caption: Vec<u32>,
    pub pose: PoseMap,
}

impl Scene {
    pub fn canvas_size(&self) -> usize {
        self.spec.canvas_size
    }

    pub fn num_characters(&self) -> usize {
        self.characters.len()
    }

    pub fn caption_text(&self) -> String {
        palette::detokenize(&self.caption)
    }

    /// Fraction of the canvas covered by each mask.
    pub fn mask_areas(&self) -> Vec<f64> {
        let n = (self.canvas_size() * self.canvas_size()) as f64;
        self.masks
            .iter()
            .map(|m| m.iter().map(|&v| v as f64).sum::<f64>() / n)
            .collect()
    }
}

fn clothing_for(spec: &SceneSpec, seed: u64) -> Vec<u32> {
    if let Some(c) = &spec.clothing_ids {
        return c.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636c_6f74_6865);
    (0..spec.num_characters).map(|_| rng.random_range(0..NUM_CLOTHING)).collect()
}

fn bbox_of(size: usize, pred: impl Fn(usize) -> bool) -> Option<Rect> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..size {
        for x in 0..size {
            if pred(y * size + x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then_some(Rect { x0, y0, x1, y1 })
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let size = spec.canvas_size;
    let n = spec.num_characters;
    let clothing = clothing_for(spec, seed);
    let action = spec.action();

    let mut canvas = Canvas::new(size);
    render::paint_background(&mut canvas, spec.background_id, seed);
    let keypoints: Vec<Keypoints> = (0..n)
        .map(|slot| render::sample_keypoints(spec.pose_seed, action, slot, n, size))
        .collect();
    for (slot, kp) in keypoints.iter().enumerate() {
        render::paint_character(&mut canvas, kp, spec.identity_ids[slot], clothing[slot], slot as u8 + 1);
    }

    let masks: Vec<Vec<u8>> = (0..=n)
        .map(|k| canvas.owner.iter().map(|&o| (o as usize == k) as u8).collect())
        .collect();

    let mut characters = Vec::with_capacity(n);
    for slot in 0..n {
        let owner = slot as u8 + 1;
        let body_rect = bbox_of(size, |i| canvas.owner[i] == owner)
            .ok_or_else(|| Error::invalid(format!("character {slot} fully occluded")))?;
        let face_rect = bbox_of(size, |i| canvas.owner[i] == owner && canvas.part[i] == Part::Head)
            .ok_or_else(|| Error::invalid(format!("character {slot} face fully occluded")))?;
        let keep = |i: usize| canvas.owner[i] == owner;
        characters.push(CharacterReference {
            slot,
            identity_id: spec.identity_ids[slot],
            clothing_id: clothing[slot],
            face_rect,
            body_rect,
            face_crop: crop(&canvas.rgb, size, face_rect, keep),
            body_crop: crop(&canvas.rgb, size, body_rect, keep),
            mask: masks[slot + 1].clone(),
            keypoints: keypoints[slot],
        });
    }

    Ok(Scene {
        spec: spec.clone(),
        seed,
        image: canvas.rgb,
        masks,
        characters,
        caption: palette::caption_tokens(spec.caption_template_id, n, action, spec.background_id),
        pose: PoseMap {
            canvas_size: size,
            characters: keypoints,
        },
    })
}

/// The background of a scene with no characters, CHW.
pub fn render_background(background_id: u32, seed: u64, size: usize) -> Result<Vec<f32>> {
    if background_id >= NUM_BACKGROUNDS {
        return Err(Error::invalid(format!("background {background_id} outside palette")));
    }
    let mut canvas = Canvas::new(size);
    render::paint_background(&mut canvas, background_id, seed);
    Ok(canvas.rgb)
}

/// Re-renders the scene with a new pose seed, keeping identities, clothing,
/// background and texture.
pub fn perturb_pose(scene: &Scene, pose_seed: u64) -> Result<Scene> {
    if scene.characters.is_empty() {
        return Err(Error::invalid("scene has no characters"));
    }
    let clothing = scene.characters.iter().map(|c| c.clothing_id).collect();
    let mut spec = scene.spec.clone().with_clothing(clothing);
    spec.pose_seed = pose_seed;
    let mut out = generate_scene(&spec, scene.seed)?;
    out.spec.clothing_ids = scene.spec.clothing_ids.clone();
    Ok(out)
}

/// An ordered, reproducible collection of scene recipes. Scenes are rendered
/// on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub mix: f64,
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub spec: SceneSpec,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scene(&self, index: usize) -> Result<Scene> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::invalid(format!("scene index {index} out of range")))?;
        generate_scene(&e.spec, e.seed)
    }

    pub fn single_count(&self) -> usize {
        self.entries.iter().filter(|e| e.spec.num_characters == 1).count()
    }
}

/// Default fraction of single-character scenes (3:2 single to two-character).
pub const DEFAULT_MIX: f64 = 0.6;

fn random_spec(rng: &mut ChaCha8Rng, n: usize, identities: &[u32]) -> SceneSpec {
    let mut ids = identities.to_vec();
    ids.shuffle(rng);
    ids.truncate(n);
    SceneSpec::new(ids, rng.random(), rng.random_range(0..NUM_BACKGROUNDS), rng.random_range(0..NUM_TEMPLATES))
}

fn build_dataset(count: usize, mix: f64, seed: u64, identities: &[u32]) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&mix) || mix.is_nan() {
        return Err(Error::invalid(format!("mix {mix} outside [0, 1]")));
    }
    let singles = (count as f64 * mix).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes: Vec<usize> = (0..count).map(|i| if i < singles { 1 } else { 2 }).collect();
    sizes.shuffle(&mut rng);
    let entries = sizes
        .into_iter()
        .map(|n| DatasetEntry {
            spec: random_spec(&mut rng, n, identities),
            seed: rng.random(),
        })
        .collect();
    Ok(Dataset { seed, mix, entries })
}

/// Training scenes over the training identity palette.
pub fn generate_dataset(count: usize, mix: f64, seed: u64) -> Result<Dataset> {
    let ids: Vec<u32> = (0..TRAIN_IDENTITIES).collect();
    build_dataset(count, mix, seed, &ids)
}

/// Scenes over an arbitrary identity pool.
pub fn generate_dataset_with_identities(count: usize, mix: f64, seed: u64, identities: &[u32]) -> Result<Dataset> {
    if identities.len() < MAX_CHARACTERS || identities.iter().any(|&i| i >= NUM_IDENTITIES) {
        return Err(Error::invalid("identity pool must hold at least two palette identities"));
    }
    build_dataset(count, mix, seed, identities)
}

/// Single-character scenes, one per held-out identity.
pub fn generate_eval_set(seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c);
    let entries = (TRAIN_IDENTITIES..NUM_IDENTITIES)
        .map(|id| DatasetEntry {
            spec: SceneSpec::new(vec![id], rng.random(), rng.random_range(0..NUM_BACKGROUNDS), 0),
            seed: rng.random(),
        })
        .collect();
    Ok(Dataset { seed, mix: 1.0, entries })
}

/// Two-character scenes over held-out identities, for leakage diagnostics.
pub fn generate_pair_eval_set(count: usize, seed: u64) -> Result<Dataset> {
    let ids: Vec<u32> = (TRAIN_IDENTITIES..NUM_IDENTITIES).collect();
    build_dataset(count, 0.0, seed ^ 0x7061_6972, &ids)
}
