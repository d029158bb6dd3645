//! On-disk datasets.
//!
//! A dataset directory holds `manifest.json` (generation parameters plus one
//! entry per scene) and `scenes/NNNNNN.bin`. Every scene blob is
//! little-endian with this layout:
//!
//! ```text
//! magic        4 bytes  "SMSC"
//! version      u32      1
//! canvas       u32      S
//! characters   u32      N
//! image        f32 × 3·S·S    CHW, values in [0, 1]
//! masks        u8  × (N+1)·S·S  region 0 = background
//! caption_len  u32
//! caption      u32 × caption_len
//! per character (N times):
//!   identity_id u32, clothing_id u32
//!   face_rect   u32 × 4   x0 y0 x1 y1 (exclusive upper bounds)
//!   body_rect   u32 × 4
//!   keypoints   f32 × 14  (x, y) for each of the 7 keypoints
//! ```
//!
//! Crops are not stored; they are recut from the image, mask and rects.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{crop, CharacterReference, Dataset, DatasetEntry, Keypoints, Point, PoseMap, Rect, Scene, NUM_KEYPOINTS};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SMSC";
const VERSION: u32 = 1;
pub const DATASET_FORMAT: &str = "storymaker-dataset/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub mix: f64,
    pub count: usize,
    pub single_character: usize,
    pub two_character: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub entry: DatasetEntry,
    pub file: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn rect(&mut self, r: &Rect) {
        for v in [r.x0, r.y0, r.x1, r.y1] {
            self.u32(v as u32);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::invalid(format!("scene blob truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
    fn rect(&mut self, size: usize) -> Result<Rect> {
        let r = Rect {
            x0: self.u32()? as usize,
            y0: self.u32()? as usize,
            x1: self.u32()? as usize,
            y1: self.u32()? as usize,
        };
        if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > size || r.y1 > size {
            return Err(Error::invalid(format!("scene blob has invalid rect {r:?}")));
        }
        Ok(r)
    }
}

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let s = scene.canvas_size();
    let n = scene.num_characters();
    let mut w = Writer(Vec::with_capacity(16 + 12 * s * s + (n + 1) * s * s + 256));
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(s as u32);
    w.u32(n as u32);
    for &v in &scene.image {
        w.f32(v);
    }
    for m in &scene.masks {
        w.0.extend_from_slice(m);
    }
    w.u32(scene.caption.len() as u32);
    for &t in &scene.caption {
        w.u32(t);
    }
    for c in &scene.characters {
        w.u32(c.identity_id);
        w.u32(c.clothing_id);
        w.rect(&c.face_rect);
        w.rect(&c.body_rect);
        for p in &c.keypoints {
            w.f32(p.x);
            w.f32(p.y);
        }
    }
    w.0
}

/// Decodes a blob; `entry` supplies the spec and seed recorded in the manifest.
pub fn decode_scene(bytes: &[u8], entry: &DatasetEntry) -> Result<Scene> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::invalid("scene blob has bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::invalid(format!("unsupported scene blob version {version}")));
    }
    let s = r.u32()? as usize;
    let n = r.u32()? as usize;
    if s != entry.spec.canvas_size || n != entry.spec.num_characters {
        return Err(Error::invalid("scene blob disagrees with manifest spec"));
    }
    let image = (0..3 * s * s).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let masks: Vec<Vec<u8>> = (0..=n).map(|_| r.take(s * s).map(<[u8]>::to_vec)).collect::<Result<_>>()?;
    let caption_len = r.u32()? as usize;
    if caption_len > super::palette::MAX_CAPTION_LEN {
        return Err(Error::invalid(format!("caption length {caption_len} too long")));
    }
    let caption = (0..caption_len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let mut characters = Vec::with_capacity(n);
    for slot in 0..n {
        let identity_id = r.u32()?;
        let clothing_id = r.u32()?;
        let face_rect = r.rect(s)?;
        let body_rect = r.rect(s)?;
        let mut keypoints: Keypoints = [Point::new(0.0, 0.0); NUM_KEYPOINTS];
        for p in keypoints.iter_mut() {
            *p = Point::new(r.f32()?, r.f32()?);
        }
        let mask = masks[slot + 1].clone();
        let keep = |i: usize| mask[i] == 1;
        characters.push(CharacterReference {
            slot,
            identity_id,
            clothing_id,
            face_rect,
            body_rect,
            face_crop: crop(&image, s, face_rect, keep),
            body_crop: crop(&image, s, body_rect, keep),
            keypoints,
            mask,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid("trailing bytes in scene blob"));
    }
    let pose = PoseMap {
        canvas_size: s,
        characters: characters.iter().map(|c| c.keypoints).collect(),
    };
    Ok(Scene {
        spec: entry.spec.clone(),
        seed: entry.seed,
        image,
        masks,
        characters,
        caption,
        pose,
    })
}

/// Renders every scene of `dataset` and writes the directory.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("scenes"))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, e) in dataset.entries.iter().enumerate() {
        let scene = super::generate_scene(&e.spec, e.seed)?;
        let file = format!("scenes/{i:06}.bin");
        fs::write(dir.join(&file), encode_scene(&scene))?;
        entries.push(ManifestEntry { entry: e.clone(), file });
    }
    let singles = dataset.single_count();
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        seed: dataset.seed,
        mix: dataset.mix,
        count: dataset.len(),
        single_character: singles,
        two_character: dataset.len() - singles,
        entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: corrupt manifest: {e}", path.display())))?;
    if m.format != DATASET_FORMAT {
        return Err(Error::invalid(format!("unsupported dataset format {:?}", m.format)));
    }
    Ok(m)
}

/// Reads the manifest and all scene blobs.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Vec<Scene>)> {
    let m = read_manifest(dir)?;
    let mut scenes = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let bytes = fs::read(dir.join(&e.file))?;
        scenes.push(decode_scene(&bytes, &e.entry)?);
    }
    let dataset = Dataset {
        seed: m.seed,
        mix: m.mix,
        entries: m.entries.into_iter().map(|e| e.entry).collect(),
    };
    Ok((dataset, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    #[test]
    fn dataset_directory_round_trips() {
        let d = generate_dataset(5, 0.6, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&d, dir.path()).unwrap();
        assert_eq!((m.single_character, m.two_character), (3, 2));
        let (d2, scenes) = read_dataset(dir.path()).unwrap();
        assert_eq!(d2, d);
        for (i, s) in scenes.iter().enumerate() {
            assert_eq!(*s, d.scene(i).unwrap());
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let d = generate_dataset(1, 1.0, 0).unwrap();
        let bytes = encode_scene(&d.scene(0).unwrap());
        assert!(decode_scene(&bytes[..bytes.len() - 3], &d.entries[0]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_scene(&bad, &d.entries[0]).is_err());
    }
}
