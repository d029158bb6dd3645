//! Evaluation on held-out identities: reference similarity of generated
//! characters, a caption-agreement analog, attention-mask IoU and the
//! region leakage matrix.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{images_to_tensor, seeded_normal, Conditioning, SamplerConfig, Vae};
use crate::encoders::{cosine, pose_tensor, Encoders, BODY_INPUT};
use crate::error::{Error, Result};
use crate::ppr::{ConditioningBatch, ConditioningBundle};
use crate::story::StoryModel;
use crate::synthdata::palette::{NUM_BACKGROUNDS, NUM_TEMPLATES};
use crate::synthdata::{crop, generate_scene, render_background, Dataset, ImagePatch, Scene, LATENT_FACTOR};

/// Threshold applied to max-normalized attention maps before IoU.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Timesteps at which attention maps are probed on noised ground truth.
pub const PROBE_TIMESTEPS: [usize; 3] = [200, 500, 800];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prompts_per_ref: usize,
    pub sampler: SamplerConfig,
    /// Seed for target poses, backgrounds and probe noise.
    pub seed: u64,
    pub probe_timesteps: Vec<usize>,
    /// Two-character scenes used for the leakage matrix.
    pub pair_scenes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts_per_ref: 2,
            sampler: SamplerConfig::default(),
            seed: 0,
            probe_timesteps: PROBE_TIMESTEPS.to_vec(),
            pair_scenes: 8,
        }
    }
}

/// Mean similarities of one generation mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub face_sim: f64,
    pub char_sim: f64,
    pub clip_t_analog: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageSummary {
    /// Mean over scenes, layers and timesteps of `L[j][k]`, the mean of map
    /// `A_j` inside mask `M_k` (region 0 is the background).
    pub matrix: Vec<Vec<f64>>,
    /// Mean over `k` of `L[k][k]` minus the mean off-diagonal entry of column `k`.
    pub diagonal_dominance: f64,
    pub scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproManifest {
    pub checkpoint_sha256: String,
    pub encoders_sha256: String,
    pub vae_sha256: String,
    pub config_sha256: String,
    pub eval_set_seed: u64,
    pub config: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub face_sim: f64,
    pub char_sim: f64,
    pub clip_t_analog: f64,
    pub attn_iou: f64,
    pub n_samples: usize,
    /// Same prompts and noise without any image prompt.
    pub baseline: SimilarityScores,
    /// Same prompts and noise with the character branch zeroed.
    pub zero_character: SimilarityScores,
    /// IoU per attention layer, averaged over cases, regions and timesteps.
    pub attn_iou_per_layer: Vec<f64>,
    /// IoU per layer with maps upsampled to the canvas and compared against
    /// full-resolution masks.
    pub attn_iou_canvas_per_layer: Vec<f64>,
    pub leakage: LeakageSummary,
    pub manifest: ReproManifest,
}

/// A reference scene and a target re-rendering of its characters.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub reference: Scene,
    pub target: Scene,
}

/// For every reference, `prompts_per_ref` targets with the same identities
/// and clothing in a new pose, background and caption template.
pub fn eval_cases(eval_set: &Dataset, prompts_per_ref: usize, seed: u64) -> Result<Vec<EvalCase>> {
    if prompts_per_ref == 0 {
        return Err(Error::invalid("prompts_per_ref must be at least 1"));
    }
    let mut cases = Vec::with_capacity(eval_set.len() * prompts_per_ref);
    for (i, entry) in eval_set.entries.iter().enumerate() {
        let reference = eval_set.scene(i)?;
        for p in 0..prompts_per_ref {
            let clothing = reference.characters.iter().map(|c| c.clothing_id).collect();
            let mut spec = reference.spec.clone().with_clothing(clothing);
            spec.background_id = (entry.spec.background_id + 1 + p as u32) % NUM_BACKGROUNDS;
            spec.caption_template_id = p as u32 % NUM_TEMPLATES;
            let mut target = None;
            for attempt in 0..8u64 {
                spec.pose_seed = seed ^ entry.seed.rotate_left(17) ^ ((p as u64) << 32 | attempt);
                if let Ok(t) = generate_scene(&spec, entry.seed ^ (p as u64 + 1)) {
                    target = Some(t);
                    break;
                }
            }
            let target = target.ok_or_else(|| Error::invalid(format!("could not place the characters of eval scene {i}")))?;
            cases.push(EvalCase {
                reference: reference.clone(),
                target,
            });
        }
    }
    Ok(cases)
}

/// Face and character-token cosine between a generated image and the
/// reference crops, averaged over characters. Crops follow the target's
/// rectangles and masks.
pub fn similarity(encoders: &Encoders, generated: &[f32], case: &EvalCase) -> Result<(f64, f64)> {
    let size = case.target.canvas_size();
    let (mut face, mut body) = (0.0, 0.0);
    for (t, r) in case.target.characters.iter().zip(&case.reference.characters) {
        let keep = |i: usize| t.mask[i] == 1;
        let gen_face = crop(generated, size, t.face_rect, keep);
        let gen_body = crop(generated, size, t.body_rect, keep);
        // A black crop has no embedding; it counts as zero similarity.
        if !gen_face.is_blank() {
            face += embed_cosine(&encoders.face.encode(&[&gen_face, &r.face_crop])?)?;
        }
        if !gen_body.is_blank() {
            let tokens = encoders.character.encode(&[&gen_body, &r.body_crop])?.tokens.mean(1)?;
            body += embed_cosine(&tokens)?;
        }
    }
    let n = case.target.characters.len() as f64;
    Ok((face / n, body / n))
}

fn embed_cosine(pair: &Tensor) -> Result<f64> {
    let rows = pair.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    Ok(cosine(&rows[0], &rows[1]))
}

/// Character-encoder agreement between an image and a character-free
/// rendering of the background its caption names.
pub fn caption_agreement(encoders: &Encoders, generated: &[f32], target: &Scene) -> Result<f64> {
    let size = target.canvas_size();
    let bg = render_background(target.spec.background_id, target.seed, size)?;
    let patch = |d: &[f32]| ImagePatch {
        width: size,
        height: size,
        data: d.to_vec(),
    };
    let (a, b) = (patch(generated), patch(&bg));
    let x = crate::encoders::patches_to_tensor(&[&a, &b], BODY_INPUT, DType::F32)?;
    embed_cosine(&encoders.character.forward(&x)?.mean(1)?)
}

/// Bilinear (half-pixel centers) upsampling of a `res × res` map.
pub fn upsample_map(map: &[f32], res: usize, size: usize) -> Vec<f32> {
    let scale = res as f32 / size as f32;
    let mut out = vec![0f32; size * size];
    let at = |y: usize, x: usize| map[y * res + x];
    for y in 0..size {
        let fy = ((y as f32 + 0.5) * scale - 0.5).clamp(0.0, (res - 1) as f32);
        let (y0, wy) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(res - 1);
        for x in 0..size {
            let fx = ((x as f32 + 0.5) * scale - 0.5).clamp(0.0, (res - 1) as f32);
            let (x0, wx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(res - 1);
            let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
            let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
            out[y * size + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Cells at or above `threshold · max(values)`. A map without positive
/// values selects nothing.
pub fn binarize(values: &[f32], threshold: f64) -> Vec<bool> {
    let max = values.iter().cloned().fold(f32::MIN, f32::max);
    let cut = threshold as f32 * max;
    values.iter().map(|&v| max > 0.0 && v >= cut).collect()
}

/// IoU between a map and a mask, both binarized with [`binarize`]. An
/// empty union counts as perfect agreement.
pub fn map_iou(map: &[f32], mask: &[f32], threshold: f64) -> f64 {
    let (a, b) = (binarize(map, threshold), binarize(mask, threshold));
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `L[j][k]` = mean of `maps[j]` over the pixels of `masks[k]`, where the
/// masks are soft weights at the map resolution.
pub fn leakage_matrix(maps: &[Vec<f32>], masks: &[Vec<f32>]) -> Vec<Vec<f64>> {
    maps.iter()
        .map(|a| {
            masks
                .iter()
                .map(|m| {
                    let w: f64 = m.iter().map(|&v| v as f64).sum();
                    if w == 0.0 {
                        0.0
                    } else {
                        a.iter().zip(m).map(|(&x, &v)| x as f64 * v as f64).sum::<f64>() / w
                    }
                })
                .collect()
        })
        .collect()
}

/// Mean over columns of the diagonal entry minus the column's mean
/// off-diagonal entry.
pub fn diagonal_dominance(l: &[Vec<f64>]) -> f64 {
    let n = l.len();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for k in 0..n {
        let off: f64 = (0..n).filter(|&j| j != k).map(|j| l[j][k]).sum::<f64>() / (n - 1) as f64;
        acc += l[k][k] - off;
    }
    acc / n as f64
}

/// Region maps of one scene: `maps[t][layer]` holds `N + 1` maps of side
/// `sides[layer]`, flattened.
#[derive(Debug, Clone)]
pub struct ProbedMaps {
    pub sides: Vec<usize>,
    pub maps: Vec<Vec<Vec<Vec<f32>>>>,
}

/// Records the image-prompt attention of each scene at fixed timesteps on
/// its noised ground-truth latent, with the scene's caption and pose.
pub fn probe_attention(
    model: &StoryModel,
    vae: &Vae,
    encoders: &Encoders,
    scenes: &[&Scene],
    bundles: &[&ConditioningBundle],
    timesteps: &[usize],
    seed: u64,
) -> Result<Vec<ProbedMaps>> {
    if scenes.len() != bundles.len() || scenes.is_empty() {
        return Err(Error::invalid("probe needs one bundle per scene"));
    }
    let size = scenes[0].canvas_size();
    let b = scenes.len();
    let z0 = vae.encode(&images_to_tensor(&scenes.iter().map(|s| s.image.as_slice()).collect::<Vec<_>>(), size, DType::F32)?)?;
    let text = encoders.text.encode_batch(&scenes.iter().map(|s| s.caption.as_slice()).collect::<Vec<_>>())?;
    let pose = pose_tensor(&scenes.iter().map(|s| &s.pose).collect::<Vec<_>>(), size * 4 / LATENT_FACTOR, DType::F32)?;
    let image = ConditioningBatch::from_bundles(bundles)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f62);
    let mut out: Vec<ProbedMaps> = (0..b).map(|_| ProbedMaps { sides: Vec::new(), maps: Vec::new() }).collect();
    for &t in timesteps {
        let noise = seeded_normal(z0.dims(), &mut rng, DType::F32)?;
        let ts = vec![t; b];
        let zt = model.schedule.add_noise(&z0, &ts, &noise)?;
        let cond = Conditioning {
            text: &text,
            image: Some(&image),
            pose: Some(&pose),
        };
        let (_, records) = model.denoiser.predict_noise(&zt, &ts, cond, true)?;
        for (i, probe) in out.iter_mut().enumerate() {
            let regions = scenes[i].num_characters() + 1;
            let mut per_layer = Vec::with_capacity(records.len());
            probe.sides = records.iter().map(|r| r.height).collect();
            for r in &records {
                let m = r.maps.get(i)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
                per_layer.push(m.into_iter().take(regions).collect());
            }
            probe.maps.push(per_layer);
        }
    }
    Ok(out)
}

/// Mean IoU per layer between each map and its mask, area-pooled to the
/// layer's resolution.
pub fn probe_iou(probe: &ProbedMaps, scene: &Scene) -> Result<Vec<f64>> {
    let size = scene.canvas_size();
    let mut pooled = Vec::with_capacity(probe.sides.len());
    for &side in &probe.sides {
        pooled.push(
            scene
                .masks
                .iter()
                .map(|m| crate::losses::downsample_mask(m, size, side))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(mean_layer_iou(probe, |layer, k, map| map_iou(map, &pooled[layer][k], IOU_THRESHOLD)))
}

/// Mean IoU per layer between maps upsampled to the canvas and the
/// full-resolution masks. Coarse layers cannot reach 1 here.
pub fn probe_iou_canvas(probe: &ProbedMaps, scene: &Scene) -> Vec<f64> {
    let size = scene.canvas_size();
    let masks: Vec<Vec<f32>> = scene.masks.iter().map(|m| m.iter().map(|&v| v as f32).collect()).collect();
    mean_layer_iou(probe, |layer, k, map| {
        map_iou(&upsample_map(map, probe.sides[layer], size), &masks[k], IOU_THRESHOLD)
    })
}

fn mean_layer_iou(probe: &ProbedMaps, iou: impl Fn(usize, usize, &[f32]) -> f64) -> Vec<f64> {
    let mut per_layer = vec![0.0; probe.sides.len()];
    for step in &probe.maps {
        for (layer, maps) in step.iter().enumerate() {
            let s: f64 = maps.iter().enumerate().map(|(k, m)| iou(layer, k, m)).sum();
            per_layer[layer] += s / maps.len() as f64;
        }
    }
    per_layer.iter_mut().for_each(|v| *v /= probe.maps.len() as f64);
    per_layer
}

/// Leakage matrix averaged over layers and timesteps.
pub fn probe_leakage(probe: &ProbedMaps, scene: &Scene) -> Result<Vec<Vec<f64>>> {
    let size = scene.canvas_size();
    let n = scene.num_characters() + 1;
    let mut acc = vec![vec![0.0; n]; n];
    let mut count = 0.0;
    for step in &probe.maps {
        for (layer, maps) in step.iter().enumerate() {
            let side = probe.sides[layer];
            let masks = scene
                .masks
                .iter()
                .map(|m| crate::losses::downsample_mask(m, size, side))
                .collect::<Result<Vec<_>>>()?;
            let l = leakage_matrix(maps, &masks);
            for j in 0..n {
                for k in 0..n {
                    acc[j][k] += l[j][k];
                }
            }
            count += 1.0;
        }
    }
    acc.iter_mut().flatten().for_each(|v| *v /= count);
    Ok(acc)
}

fn sha256_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(v)?)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Generates every case with, without and with zeroed character features,
/// and scores the three runs.
pub fn evaluate(
    model: &StoryModel,
    encoders: &Encoders,
    vae: &Vae,
    eval_set: &Dataset,
    pair_set: &Dataset,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let cases = eval_cases(eval_set, config.prompts_per_ref, config.seed)?;
    let size = cases[0].target.canvas_size();
    let bundles = cases
        .iter()
        .map(|c| model.conditioning(encoders, &c.reference.characters.iter().collect::<Vec<_>>(), false))
        .collect::<Result<Vec<_>>>()?;
    let zeroed = cases
        .iter()
        .map(|c| model.conditioning(encoders, &c.reference.characters.iter().collect::<Vec<_>>(), true))
        .collect::<Result<Vec<_>>>()?;
    let captions: Vec<&[u32]> = cases.iter().map(|c| c.target.caption.as_slice()).collect();
    let poses: Vec<_> = cases.iter().map(|c| &c.target.pose).collect();

    let run = |b: Option<&[&ConditioningBundle]>| -> Result<SimilarityScores> {
        let mut scores = Vec::with_capacity(cases.len());
        for (chunk_start, chunk) in (0..cases.len()).step_by(16).map(|s| (s, &cases[s..(s + 16).min(cases.len())])) {
            let end = chunk_start + chunk.len();
            let images = model.generate(
                vae,
                encoders,
                b.map(|v| &v[chunk_start..end]),
                &captions[chunk_start..end],
                Some(&poses[chunk_start..end]),
                size,
                config.sampler,
            )?;
            for (img, case) in images.iter().zip(chunk) {
                let (f, c) = similarity(encoders, img, case)?;
                scores.push([f, c, caption_agreement(encoders, img, &case.target)?]);
            }
        }
        Ok(SimilarityScores {
            face_sim: mean(&scores.iter().map(|s| s[0]).collect::<Vec<_>>()),
            char_sim: mean(&scores.iter().map(|s| s[1]).collect::<Vec<_>>()),
            clip_t_analog: mean(&scores.iter().map(|s| s[2]).collect::<Vec<_>>()),
        })
    };
    let full_refs: Vec<&ConditioningBundle> = bundles.iter().collect();
    let zero_refs: Vec<&ConditioningBundle> = zeroed.iter().collect();
    let main = run(Some(&full_refs))?;
    let baseline = run(None)?;
    let zero_character = run(Some(&zero_refs))?;

    let targets: Vec<&Scene> = cases.iter().map(|c| &c.target).collect();
    let probes = probe_attention(model, vae, encoders, &targets, &full_refs, &config.probe_timesteps, config.seed)?;
    let layers = probes[0].sides.len();
    let (mut iou_layers, mut canvas_layers) = (vec![0.0; layers], vec![0.0; layers]);
    for (p, case) in probes.iter().zip(&cases) {
        for (acc, v) in iou_layers.iter_mut().zip(probe_iou(p, &case.target)?) {
            *acc += v / cases.len() as f64;
        }
        for (acc, v) in canvas_layers.iter_mut().zip(probe_iou_canvas(p, &case.target)) {
            *acc += v / cases.len() as f64;
        }
    }

    let leakage = pair_leakage(model, vae, encoders, pair_set, config)?;
    let manifest = ReproManifest {
        checkpoint_sha256: model.checksum()?,
        encoders_sha256: encoders.checksum()?,
        vae_sha256: vae.checksum()?,
        config_sha256: sha256_json(config)?,
        eval_set_seed: eval_set.seed,
        config: config.clone(),
    };
    Ok(EvalReport {
        face_sim: main.face_sim,
        char_sim: main.char_sim,
        clip_t_analog: main.clip_t_analog,
        attn_iou: mean(&iou_layers),
        n_samples: cases.len(),
        baseline,
        zero_character,
        attn_iou_per_layer: iou_layers,
        attn_iou_canvas_per_layer: canvas_layers,
        leakage,
        manifest,
    })
}

/// Runs [`evaluate`] with the pair scenes derived from `config.seed` and
/// returns the pretty-printed report.
pub fn eval_json(model: &StoryModel, encoders: &Encoders, vae: &Vae, eval_set: &Dataset, config: &EvalConfig) -> Result<String> {
    let pairs = crate::synthdata::generate_pair_eval_set(config.pair_scenes.max(1), config.seed)?;
    let report = evaluate(model, encoders, vae, eval_set, &pairs, config)?;
    for v in [report.face_sim, report.char_sim, report.clip_t_analog, report.attn_iou] {
        if !v.is_finite() {
            return Err(Error::non_finite("evaluation metrics"));
        }
    }
    Ok(serde_json::to_string_pretty(&report)? + "\n")
}

/// Leakage on two-character scenes, each conditioned on its own characters
/// seen in another pose.
pub fn pair_leakage(model: &StoryModel, vae: &Vae, encoders: &Encoders, pair_set: &Dataset, config: &EvalConfig) -> Result<LeakageSummary> {
    let scenes = (0..pair_set.len().min(config.pair_scenes)).map(|i| pair_set.scene(i)).collect::<Result<Vec<_>>>()?;
    if scenes.is_empty() {
        return Err(Error::invalid("no pair scenes for the leakage matrix"));
    }
    let refs = scenes.iter().map(crate::trainer::reference_scene).collect::<Result<Vec<_>>>()?;
    let bundles = refs
        .iter()
        .map(|r| model.conditioning(encoders, &r.characters.iter().collect::<Vec<_>>(), false))
        .collect::<Result<Vec<_>>>()?;
    let probes = probe_attention(
        model,
        vae,
        encoders,
        &scenes.iter().collect::<Vec<_>>(),
        &bundles.iter().collect::<Vec<_>>(),
        &config.probe_timesteps,
        config.seed,
    )?;
    let n = scenes[0].num_characters() + 1;
    let mut matrix = vec![vec![0.0; n]; n];
    for (p, s) in probes.iter().zip(&scenes) {
        let l = probe_leakage(p, s)?;
        if l.len() != n {
            return Err(Error::invalid("pair scenes must all have the same character count"));
        }
        for j in 0..n {
            for k in 0..n {
                matrix[j][k] += l[j][k] / scenes.len() as f64;
            }
        }
    }
    Ok(LeakageSummary {
        diagonal_dominance: diagonal_dominance(&matrix),
        matrix,
        scenes: scenes.len(),
    })
}

/// Scores the references against themselves: similarities are exactly 1
/// and attention is not probed.
pub fn reference_self_report(encoders: &Encoders, eval_set: &Dataset) -> Result<SimilarityScores> {
    let mut scores = Vec::new();
    for i in 0..eval_set.len() {
        let s = eval_set.scene(i)?;
        let case = EvalCase {
            reference: s.clone(),
            target: s.clone(),
        };
        let (f, c) = similarity(encoders, &s.image, &case)?;
        scores.push([f, c, caption_agreement(encoders, &s.image, &s)?]);
    }
    Ok(SimilarityScores {
        face_sim: mean(&scores.iter().map(|s| s[0]).collect::<Vec<_>>()),
        char_sim: mean(&scores.iter().map(|s| s[1]).collect::<Vec<_>>()),
        clip_t_analog: mean(&scores.iter().map(|s| s[2]).collect::<Vec<_>>()),
    })
}

/// Writes a CHW image in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, chw: &[f32], size: usize) -> Result<()> {
    let px = size * size;
    if chw.len() != 3 * px {
        return Err(Error::invalid(format!("expected {} values for a {size}x{size} image", 3 * px)));
    }
    let mut buf = Vec::with_capacity(3 * px);
    for i in 0..px {
        for c in 0..3 {
            buf.push(to_byte(chw[c * px + i]));
        }
    }
    image::save_buffer(path, &buf, size as u32, size as u32, image::ColorType::Rgb8)?;
    Ok(())
}

/// Writes a square map as a grayscale PNG, scaled so its maximum is white
/// and enlarged by nearest-neighbour to `size`.
pub fn write_map_png(path: &Path, map: &[f32], side: usize, size: usize) -> Result<()> {
    let max = map.iter().cloned().fold(0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let buf: Vec<u8> = (0..size * size)
        .map(|i| {
            let (y, x) = (i / size * side / size, i % size * side / size);
            to_byte(map[y * side + x] * scale)
        })
        .collect();
    image::save_buffer(path, &buf, size as u32, size as u32, image::ColorType::L8)?;
    Ok(())
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub timestep: usize,
    pub layer_sides: Vec<usize>,
    /// Per layer, `L[j][k]` = mean of `A_j` inside `M_k`.
    pub leakage: Vec<Vec<Vec<f64>>>,
    pub diagonal_dominance: Vec<f64>,
    pub files: Vec<String>,
}

/// Dumps every layer's region maps for one scene at one timestep as
/// `layer{l}_region{k}.png` under `out`, along with the leakage matrices.
#[allow(clippy::too_many_arguments)]
pub fn inspect_attention(
    model: &StoryModel,
    vae: &Vae,
    encoders: &Encoders,
    scene: &Scene,
    bundle: &ConditioningBundle,
    timestep: usize,
    seed: u64,
    out: &Path,
) -> Result<InspectReport> {
    if timestep >= model.schedule.steps() {
        return Err(Error::invalid(format!("timestep must be below {}", model.schedule.steps())));
    }
    std::fs::create_dir_all(out)?;
    let probe = probe_attention(model, vae, encoders, &[scene], &[bundle], &[timestep], seed)?.remove(0);
    let size = scene.canvas_size();
    let mut report = InspectReport {
        timestep,
        layer_sides: probe.sides.clone(),
        leakage: Vec::new(),
        diagonal_dominance: Vec::new(),
        files: Vec::new(),
    };
    for (layer, maps) in probe.maps[0].iter().enumerate() {
        let side = probe.sides[layer];
        for (k, m) in maps.iter().enumerate() {
            let name = format!("layer{layer}_region{k}.png");
            write_map_png(&out.join(&name), m, side, size)?;
            report.files.push(name);
        }
        let masks = scene
            .masks
            .iter()
            .map(|m| crate::losses::downsample_mask(m, size, side))
            .collect::<Result<Vec<_>>>()?;
        let l = leakage_matrix(maps, &masks);
        report.diagonal_dominance.push(diagonal_dominance(&l));
        report.leakage.push(l);
    }
    write_rgb_png(&out.join("scene.png"), &scene.image, size)?;
    report.files.push("scene.png".into());
    std::fs::write(out.join("leakage.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
