//! End-to-end acceptance suite. Runs without the libtest harness so the
//! per-criterion verdicts are always printed.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use candle_core::{DType, Tensor, Var};
use storymaker_core::attention::{aggregate_region_maps, AttentionConfig, DecoupledCrossAttention};
use storymaker_core::backbone::{Conditioning, Denoiser, SamplerConfig, UNet, UNetConfig, Vae};
use storymaker_core::encoders::{Encoders, FeatureSequence, Role};
use storymaker_core::eval::{self, EvalConfig, EvalReport};
use storymaker_core::losses::{attention_loss, composite_loss, composite_loss_tensor, MaskTargets};
use storymaker_core::params::{device, ParamStore};
use storymaker_core::ppr::{
    interpolate_conditioning, CharacterFeatures, ConditioningBatch, ConditioningBundle, PositionalResampler, PprConfig, RegionKind, Resampler,
};
use storymaker_core::pretrain::BaseModel;
use storymaker_core::story::{is_story_trainable, ModelConfig, StoryModel, TRAINABLE_GROUPS};
use storymaker_core::synthdata::{generate_eval_set, generate_pair_eval_set, CANVAS_SIZE};
use storymaker_core::trainer::{prepare_data, TrainConfig, TrainData, Trainer};

use common::{fixture, max_gradient_error, randn, var};

type Check = std::result::Result<Vec<String>, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_vec(a).iter().zip(to_vec(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_refs(n: usize, cfg: &PprConfig, seed: u64, dtype: DType) -> Vec<CharacterFeatures> {
    (0..n as u64)
        .map(|i| CharacterFeatures {
            face: randn(&[cfg.face_dim], seed * 31 + 2 * i, dtype),
            character: FeatureSequence::new(randn(&[16, cfg.char_dim], seed * 31 + 2 * i + 1, dtype), Role::Character).unwrap(),
        })
        .collect()
}

fn c1_shape_contract() -> Check {
    let mut cases = 0;
    for n in [1usize, 2] {
        for l in [2usize, 4, 8] {
            for d in [16usize, 64] {
                let cfg = PprConfig { num_tokens: l, dim: d, depth: 1, heads: 4, face_dim: 12, char_dim: 10, max_characters: 2 };
                let mut store = ParamStore::new(DType::F64, (n * 100 + l * 10 + d) as u64);
                let ppr = PositionalResampler::new(&mut store.root().pp("ppr"), cfg).map_err(|e| e.to_string())?;
                let refs = random_refs(n, &cfg, cases as u64, DType::F64);
                let bundle = ppr.build_conditioning(&refs, false).map_err(|e| e.to_string())?;
                ensure!(bundle.tokens.dims() == [(n + 1) * l, d], "N={n} L={l} D={d}: shape {:?}", bundle.tokens.dims());
                ensure!(bundle.rows() == (n + 1) * l && bundle.num_characters == n, "N={n} L={l} D={d}: metadata");
                let layout = bundle.layout();
                ensure!(layout.len() == n + 1, "layout has {} regions", layout.len());
                for (k, region) in layout.iter().enumerate() {
                    let kind = if k == 0 { RegionKind::Background } else { RegionKind::Character(k - 1) };
                    ensure!(region.kind == kind && region.rows == (k * l..(k + 1) * l), "region {k} is {region:?}");
                    let rows = bundle.tokens.narrow(0, k * l, l).unwrap();
                    let expected = if k == 0 {
                        ppr.background.clone()
                    } else {
                        let r = &refs[k - 1];
                        let e1 = ppr.resample_face(&r.face.reshape((1, cfg.face_dim)).unwrap()).unwrap();
                        let e2 = ppr.resample_character(&r.character).unwrap();
                        ppr.fuse_character(&e1, &e2, k - 1).unwrap()
                    };
                    let err = max_abs_diff(&rows, &expected);
                    ensure!(err < 1e-10, "N={n} L={l} D={d}: region {k} rows differ by {err:e}");
                }
                cases += 1;
            }
        }
    }
    Ok(vec![format!("{cases} (N, L, D) configurations")])
}

fn random_bundle(n: usize, l: usize, d: usize, seed: u64, dtype: DType) -> ConditioningBundle {
    ConditioningBundle { tokens: randn(&[(n + 1) * l, d], seed, dtype), num_characters: n, tokens_per_region: l, dim: d }
}

fn c2_softmax_partition() -> Check {
    let model = StoryModel::build(BTreeMap::new(), 3, ModelConfig::default()).map_err(|e| e.to_string())?;
    let cfg = model.config;
    let (mut rows_checked, mut worst_p, mut worst_a) = (0usize, 0f64, 0f64);
    for trial in 0..3u64 {
        let counts = [1usize, 2, 2 - (trial as usize % 2)];
        let bundles: Vec<_> = counts.iter().enumerate().map(|(i, &n)| random_bundle(n, cfg.ppr.num_tokens, cfg.ppr.dim, trial * 10 + i as u64, DType::F32)).collect();
        let batch = ConditioningBatch::from_bundles(&bundles.iter().collect::<Vec<_>>()).unwrap();
        let b = counts.len();
        let z = randn(&[b, cfg.unet.latent_channels, 8, 8], 100 + trial, DType::F32);
        let text = randn(&[b, 8, cfg.unet.text_dim], 200 + trial, DType::F32);
        let pose = randn(&[b, storymaker_core::synthdata::NUM_KEYPOINTS, 32, 32], 300 + trial, DType::F32).abs().unwrap();
        let ts = vec![17 + 400 * trial as usize; b];
        let cond = Conditioning { text: &text, image: Some(&batch), pose: Some(&pose) };
        let (_, records) = model.denoiser.predict_noise(&z, &ts, cond, true).map_err(|e| e.to_string())?;
        ensure!(records.len() == storymaker_core::backbone::unet::NUM_ATTENTION_LAYERS, "{} records", records.len());
        for r in &records {
            let sums = r.probs.sum(2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            rows_checked += sums.len();
            worst_p = sums.iter().map(|s| (*s as f64 - 1.0).abs()).fold(worst_p, f64::max);
            let maps = r.maps.to_vec3::<f32>().unwrap();
            for (scene, m) in maps.iter().enumerate() {
                let present = counts[scene] + 1;
                for q in 0..m[0].len() {
                    let s: f64 = m.iter().map(|row| row[q] as f64).sum();
                    worst_a = worst_a.max((s - 1.0).abs());
                    for absent in &m[present..] {
                        ensure!(absent[q].abs() < 1e-6, "layer {}: absent region has mass {}", r.layer, absent[q]);
                    }
                }
            }
        }
    }
    ensure!(worst_p <= 1e-5, "a P row deviates from 1 by {worst_p:e}");
    ensure!(worst_a <= 1e-5, "sum of region maps deviates from 1 by {worst_a:e}");
    Ok(vec![format!("{rows_checked} rows, max |ΣP−1| {worst_p:.1e}, max |ΣA−1| {worst_a:.1e}")])
}

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn trainable_store(seed: u64) -> ParamStore {
    let mut s = ParamStore::new(DType::F64, seed);
    s.set_trainable(|_| true);
    s
}

fn grad_resample() -> std::result::Result<(String, f64), String> {
    let mut store = trainable_store(11);
    let r = Resampler::new(&mut store.root().pp("r"), 6, 3, 8, 2, 2).map_err(|e| e.to_string())?;
    let x = var(&[4, 6], 1);
    let w = randn(&[3, 8], 2, DType::F64);
    let mut vars = store.trainable_vars();
    vars.push(("input".into(), x.clone()));
    Ok(max_gradient_error(&vars, FD_STEP, || Ok((r.forward(x.as_tensor())? * &w)?.sum_all()?)))
}

fn attention_layer(store: &mut ParamStore, lora: Option<usize>, dim: usize) -> DecoupledCrossAttention {
    let cfg = AttentionConfig { query_dim: dim, text_dim: dim, image_dim: dim, heads: 2, lora_rank: lora, image_prompt: true };
    DecoupledCrossAttention::new(&mut store.root().pp("attn"), cfg).unwrap()
}

fn grad_attend() -> std::result::Result<(String, f64), String> {
    let mut store = trainable_store(12);
    let layer = attention_layer(&mut store, Some(2), 6);
    // Non-zero up factors and gamma so every path carries gradient.
    for (i, name) in store.trainable_names().iter().enumerate() {
        if name.ends_with("lora_up") {
            let shape = store.tensor(name).unwrap().dims().to_vec();
            store.assign(name, &(randn(&shape, 40 + i as u64, DType::F64) * 0.3).unwrap()).unwrap();
        }
    }
    store.assign("attn.gamma", &Tensor::new(0.7f64, &device()).unwrap()).unwrap();
    let z = var(&[1, 2, 6], 3);
    let text = var(&[1, 3, 6], 4);
    let image = var(&[4, 6], 5);
    let w = randn(&[1, 2, 6], 6, DType::F64);
    let mut vars: Vec<(String, Var)> = store
        .trainable_vars()
        .into_iter()
        .filter(|(n, _)| n.contains("lora_") || n.ends_with("gamma") || n.contains("_ip."))
        .collect();
    vars.extend([("queries".into(), z.clone()), ("text tokens".into(), text.clone()), ("image tokens".into(), image.clone())]);
    Ok(max_gradient_error(&vars, FD_STEP, || {
        let bundle = ConditioningBundle { tokens: image.as_tensor().clone(), num_characters: 1, tokens_per_region: 2, dim: 6 };
        let batch = ConditioningBatch::from_bundles(&[&bundle])?;
        let (y, _) = layer.attend(z.as_tensor(), text.as_tensor(), Some(&batch), None)?;
        Ok((y * &w)?.sum_all()?)
    }))
}

fn quadrant_targets(dtype: DType) -> MaskTargets {
    let bg = vec![1u8, 1, 0, 0];
    let ch = vec![0u8, 0, 1, 1];
    let masks = vec![bg, ch];
    MaskTargets::new(&[&masks[..]], 2, 2, 2, dtype).unwrap()
}

fn grad_attention_loss() -> std::result::Result<(String, f64), String> {
    let logits = var(&[1, 4, 2], 7);
    let targets = quadrant_targets(DType::F64);
    Ok(max_gradient_error(&[("logits".into(), logits.clone())], FD_STEP, || {
        let probs = storymaker_core::nn::softmax_last(logits.as_tensor())?;
        attention_loss(&aggregate_region_maps(&probs, 1)?, &targets)
    }))
}

fn grad_predict_noise() -> std::result::Result<(String, f64), String> {
    let mut store = ParamStore::new(DType::F64, 13);
    let cfg = UNetConfig::story();
    let unet = UNet::new(&mut store.root().pp("unet"), cfg).map_err(|e| e.to_string())?;
    let denoiser = Denoiser { unet, pose: None };
    let z = var(&[1, cfg.latent_channels, 4, 4], 8);
    let text = randn(&[1, 8, cfg.text_dim], 9, DType::F64);
    let bundle = random_bundle(1, 4, cfg.image_dim, 10, DType::F64);
    let batch = ConditioningBatch::from_bundles(&[&bundle]).unwrap();
    Ok(max_gradient_error(&[("latent".into(), z.clone())], FD_STEP, || {
        let cond = Conditioning { text: &text, image: Some(&batch), pose: None };
        Ok(denoiser.predict_noise(z.as_tensor(), &[321], cond, false)?.0.mean_all()?)
    }))
}

fn c3_gradients() -> Check {
    let mut lines = Vec::new();
    for (label, check) in [
        ("resample", grad_resample as fn() -> std::result::Result<(String, f64), String>),
        ("attend", grad_attend),
        ("attention_loss", grad_attention_loss),
        ("predict_noise", grad_predict_noise),
    ] {
        let (worst, err) = check()?;
        ensure!(err < GRAD_TOL, "{label}: relative error {err:.2e} on {worst}");
        lines.push(format!("{label}: worst relative error {err:.1e} ({worst})"));
    }
    Ok(lines)
}

fn c4_degenerate_identities() -> Check {
    // gamma = 0 gives the text-only output.
    let mut store = ParamStore::new(DType::F32, 21);
    let layer = attention_layer(&mut store, Some(2), 8);
    for (i, name) in store.names().map(String::from).collect::<Vec<_>>().iter().enumerate() {
        if name.ends_with("lora_up") {
            let shape = store.tensor(name).unwrap().dims().to_vec();
            store.assign(name, &randn(&shape, 60 + i as u64, DType::F32)).unwrap();
        }
    }
    store.assign("attn.gamma", &Tensor::new(0f32, &device()).unwrap()).unwrap();
    let z = randn(&[2, 5, 8], 1, DType::F32);
    let text = randn(&[2, 3, 8], 2, DType::F32);
    let bundles = [random_bundle(1, 2, 8, 3, DType::F32), random_bundle(2, 2, 8, 4, DType::F32)];
    let batch = ConditioningBatch::from_bundles(&[&bundles[0], &bundles[1]]).unwrap();
    let with_image = layer.attend(&z, &text, Some(&batch), None).unwrap().0;
    let text_only = layer.attend(&z, &text, None, None).unwrap().0;
    ensure!(bits(&with_image) == bits(&text_only), "gamma = 0 output differs from text-only attention");

    // Zero LoRA deltas give the base layer.
    let mut lora_store = ParamStore::new(DType::F32, 22);
    let with_lora = attention_layer(&mut lora_store, Some(4), 8);
    let mut plain_store = ParamStore::new(DType::F32, 22);
    let plain = attention_layer(&mut plain_store, None, 8);
    for (a, b) in [(&with_lora.to_q, &plain.to_q), (&with_lora.to_k, &plain.to_k), (&with_lora.to_out, &plain.to_out)] {
        ensure!(bits(&a.effective().unwrap()) == bits(&b.weight), "zero delta changed a base weight");
    }
    let y_lora = with_lora.attend(&z, &text, Some(&batch), None).unwrap().0;
    let y_plain = plain.attend(&z, &text, Some(&batch), None).unwrap().0;
    ensure!(bits(&y_lora) == bits(&y_plain), "zero-delta layer output differs from the LoRA-free layer");

    // Fresh pose branch leaves the prediction bitwise unchanged.
    let model = StoryModel::build(BTreeMap::new(), 23, ModelConfig::default()).map_err(|e| e.to_string())?;
    let zt = randn(&[2, 4, 8, 8], 5, DType::F32);
    let ctext = randn(&[2, 8, 64], 6, DType::F32);
    let cb = [random_bundle(1, 4, 64, 7, DType::F32), random_bundle(2, 4, 64, 8, DType::F32)];
    let cbatch = ConditioningBatch::from_bundles(&[&cb[0], &cb[1]]).unwrap();
    let pose = randn(&[2, storymaker_core::synthdata::NUM_KEYPOINTS, 32, 32], 9, DType::F32).abs().unwrap();
    let run = |p: Option<&Tensor>| {
        let cond = Conditioning { text: &ctext, image: Some(&cbatch), pose: p };
        model.denoiser.predict_noise(&zt, &[10, 900], cond, false).unwrap().0
    };
    ensure!(bits(&run(Some(&pose))) == bits(&run(None)), "fresh pose branch changed the prediction");

    // lambda = 0 gives the diffusion loss alone.
    let report = composite_loss(0.731, &[0.2, 0.9, 0.4], 0.0).unwrap();
    ensure!(report.total == report.l_sd, "lambda = 0: total {} vs l_sd {}", report.total, report.l_sd);
    let l_sd = Tensor::new(0.731f32, &device()).unwrap();
    let attn: Vec<Tensor> = [0.2f32, 0.9, 0.4].iter().map(|v| Tensor::new(*v, &device()).unwrap()).collect();
    let total = composite_loss_tensor(&l_sd, &attn, 0.0).unwrap();
    ensure!(bits(&total) == bits(&l_sd), "lambda = 0: differentiable total differs from l_sd");
    Ok(vec!["gamma = 0, zero LoRA delta, fresh pose branch and lambda = 0 are exact".into()])
}

fn c5_hand_oracles() -> Check {
    const TOL: f64 = 1e-6;
    // One query, two image keys with logits 0 and ln 3 (single head, width 2).
    let mut store = ParamStore::new(DType::F64, 31);
    let cfg = AttentionConfig { query_dim: 2, text_dim: 2, image_dim: 2, heads: 1, lora_rank: None, image_prompt: true };
    let layer = DecoupledCrossAttention::new(&mut store.root().pp("a"), cfg).unwrap();
    let eye = Tensor::eye(2, DType::F64, &device()).unwrap();
    for name in ["a.to_q.weight", "a.to_k.weight", "a.to_v.weight", "a.to_k_ip.weight", "a.to_v_ip.weight", "a.to_out.weight"] {
        store.assign(name, &eye).unwrap();
    }
    let ln3 = 3f64.ln();
    let key2 = ln3 * 2f64.sqrt();
    let image = [[0.0, 0.5], [key2, -1.0]];
    let text_tok = [0.3, -0.2];
    let z = Tensor::new(&[[[1.0f64, 0.0]]], &device()).unwrap();
    let text = Tensor::new(&[[text_tok]], &device()).unwrap();
    let bundle = ConditioningBundle { tokens: Tensor::new(&image, &device()).unwrap(), num_characters: 1, tokens_per_region: 1, dim: 2 };
    let batch = ConditioningBatch::from_bundles(&[&bundle]).unwrap();
    let (y, rec) = layer.attend(&z, &text, Some(&batch), Some((0, 1, 1))).unwrap();
    let probs = to_vec(&rec.unwrap().probs);
    ensure!((probs[0] - 0.25).abs() < TOL && (probs[1] - 0.75).abs() < TOL, "image weights {probs:?}");
    let y = to_vec(&y);
    for c in 0..2 {
        let expected = text_tok[c] + 0.25 * image[0][c] + 0.75 * image[1][c];
        ensure!((y[c] - expected).abs() < TOL, "attend output {y:?}");
    }

    // Region maps on random row-stochastic P against direct column sums.
    let (q, l, regions) = (5usize, 3usize, 3usize);
    let raw = to_vec(&randn(&[2, q, l * regions], 41, DType::F64).exp().unwrap());
    let mut p = raw.clone();
    for row in p.chunks_mut(l * regions) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let pt = Tensor::from_vec(p.clone(), (2, q, l * regions), &device()).unwrap();
    let maps = to_vec(&aggregate_region_maps(&pt, l).unwrap());
    for b in 0..2 {
        for k in 0..regions {
            for qi in 0..q {
                let mut direct = 0.0;
                for j in 0..l {
                    direct += p[(b * q + qi) * l * regions + k * l + j];
                }
                let got = maps[(b * regions + k) * q + qi];
                ensure!((got - direct).abs() < TOL, "A[{b}][{k}][{qi}] = {got}, direct sum {direct}");
            }
        }
    }

    // Uniform half maps against quadrant masks.
    let half = Tensor::full(0.5f64, (1, 2, 4), &device()).unwrap();
    let loss = attention_loss(&half, &quadrant_targets(DType::F64)).unwrap().to_scalar::<f64>().unwrap();
    ensure!((loss - 0.25).abs() < TOL, "attention loss {loss}, expected 0.25");

    let report = composite_loss(1.0, &[0.1, 0.2, 0.3], 0.1).unwrap();
    ensure!((report.total - 1.02).abs() < TOL, "composite total {}, expected 1.02", report.total);
    Ok(vec![format!("softmax weights {:.6}/{:.6}, attention loss {loss:.6}, composite {:.6}", probs[0], probs[1], report.total)])
}

/// Pretrained frozen components and the shared training set.
struct Env {
    encoders: Encoders,
    vae: Vae,
    base: BaseModel,
    data: Arc<TrainData>,
}

impl Env {
    fn load() -> std::result::Result<Self, String> {
        let encoders = Encoders::load(&fixture("encoders")).map_err(|e| e.to_string())?;
        let vae = Vae::load(&fixture("vae")).map_err(|e| e.to_string())?.0;
        let base = BaseModel::load(&fixture("base")).map_err(|e| e.to_string())?;
        let data = Arc::new(prepare_data(&TrainConfig::default(), &encoders, &vae).map_err(|e| e.to_string())?);
        Ok(Self { encoders, vae, base, data })
    }

    fn trainer(&self, config: TrainConfig) -> std::result::Result<Trainer, String> {
        let model = StoryModel::from_base(&self.base, config.seed).map_err(|e| e.to_string())?;
        Trainer::new(config, model, self.data.clone()).map_err(|e| e.to_string())
    }
}

fn c6_partition(env: &Env) -> Check {
    let mut trainer = env.trainer(TrainConfig { total_steps: 100, phase_boundary: 50, ..Default::default() })?;
    let declared: Vec<String> = trainer.model.store.names().filter(|n| is_story_trainable(n)).map(String::from).collect();
    ensure!(trainer.optimized_names() == declared, "optimizer set differs from the declared trainable set");
    let before = trainer.model.store.checksums().map_err(|e| e.to_string())?;
    let (vae0, enc0) = (env.vae.checksum().unwrap(), env.encoders.checksum().unwrap());
    trainer.run(None, None).map_err(|e| e.to_string())?;
    let after = trainer.model.store.checksums().map_err(|e| e.to_string())?;
    ensure!(env.vae.checksum().unwrap() == vae0, "VAE weights changed");
    ensure!(env.encoders.checksum().unwrap() == enc0, "encoder weights changed");
    let changed = |n: &str| before[n] != after[n];
    let frozen_changed: Vec<_> = before.keys().filter(|n| !is_story_trainable(n) && changed(n)).collect();
    ensure!(frozen_changed.is_empty(), "frozen tensors changed: {frozen_changed:?}");
    let projections = before.keys().filter(|n| n.starts_with("unet.") && [".to_q.weight", ".to_k.weight", ".to_v.weight"].iter().any(|s| n.ends_with(s))).count();
    ensure!(projections > 0, "no base projections found");
    let stale: Vec<_> = declared.iter().filter(|n| !changed(n)).collect();
    ensure!(stale.is_empty(), "trainable tensors left unchanged: {stale:?}");
    let groups: Vec<_> = TRAINABLE_GROUPS.iter().map(|(g, p)| format!("{g} ({})", declared.iter().filter(|n| p(n)).count())).collect();
    Ok(vec![
        format!("{} frozen tensors unchanged, including {projections} base projections; VAE and encoders unchanged", before.len() - declared.len()),
        format!("all {} trainable tensors changed: {}", declared.len(), groups.join(", ")),
    ])
}

fn eval_config() -> EvalConfig {
    EvalConfig::default()
}

struct Trained {
    model: StoryModel,
    init: EvalReport,
    last: EvalReport,
}

fn evaluate(env: &Env, model: &StoryModel) -> EvalReport {
    let eval_set = generate_eval_set(0).unwrap();
    let pairs = generate_pair_eval_set(eval_config().pair_scenes, 0).unwrap();
    eval::evaluate(model, &env.encoders, &env.vae, &eval_set, &pairs, &eval_config()).unwrap()
}

fn fmt_layers(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", "))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 }
}

/// The default recipe with the learning rates scaled up tenfold, since the
/// resampler and pose branch start from random weights.
fn toy_recipe() -> TrainConfig {
    TrainConfig { lr_phase1: 1e-3, lr_phase2: 5e-4, ..Default::default() }
}

fn c7_training(env: &Env, out: &mut Option<Trained>) -> Check {
    let config = toy_recipe();
    let init_model = StoryModel::from_base(&env.base, config.seed).unwrap();
    let init = evaluate(env, &init_model);
    drop(init_model);
    let mut trainer = env.trainer(config.clone())?;
    let started = Instant::now();
    let reports = trainer.run(None, None).map_err(|e| e.to_string())?;
    let train_time = started.elapsed();
    let last = evaluate(env, &trainer.model);
    let totals: Vec<f64> = reports.iter().map(|r| r.total).collect();
    let (first, tail) = (median(&totals[..100]), median(&totals[totals.len() - 100..]));
    let mut lines = vec![
        format!("{} steps, batch {}, lambda {} in {:.0} s", config.total_steps, config.batch_size, config.lambda, train_time.as_secs_f64()),
        format!("(a) median total loss first/last 100 steps: {first:.5} / {tail:.5}"),
        format!(
            "(b) attn_iou init {:.4} -> final {:.4} (ratio {:.2}, per layer {} -> {})",
            init.attn_iou,
            last.attn_iou,
            last.attn_iou / init.attn_iou,
            fmt_layers(&init.attn_iou_per_layer),
            fmt_layers(&last.attn_iou_per_layer)
        ),
        format!(
            "    at canvas resolution per layer {} -> {}",
            fmt_layers(&init.attn_iou_canvas_per_layer),
            fmt_layers(&last.attn_iou_canvas_per_layer)
        ),
        format!(
            "(c) face_sim {:.4} vs baseline {:.4}; char_sim {:.4} vs baseline {:.4} ({} samples)",
            last.face_sim, last.baseline.face_sim, last.char_sim, last.baseline.char_sim, last.n_samples
        ),
        format!("(d) diagonal dominance init {:.4} -> final {:.4}", init.leakage.diagonal_dominance, last.leakage.diagonal_dominance),
        format!(
            "untrained model for reference: face_sim {:.4}, char_sim {:.4}, clip_t_analog {:.4} (final {:.4})",
            init.face_sim, init.char_sim, init.clip_t_analog, last.clip_t_analog
        ),
    ];
    let mut failures = Vec::new();
    if train_time > Duration::from_secs(2 * 3600) {
        failures.push("training exceeded two hours");
    }
    if !(tail < first) {
        failures.push("(a) loss did not decrease");
    }
    if !(last.attn_iou >= 1.5 * init.attn_iou) {
        failures.push("(b) attn_iou gain below 1.5x");
    }
    if !(last.face_sim > last.baseline.face_sim && last.char_sim > last.baseline.char_sim) {
        failures.push("(c) similarities do not exceed the unconditioned baseline");
    }
    if !(last.leakage.diagonal_dominance > init.leakage.diagonal_dominance) {
        failures.push("(d) diagonal dominance did not increase");
    }
    *out = Some(Trained { model: trainer.model, init, last });
    if failures.is_empty() {
        Ok(lines)
    } else {
        lines.insert(0, failures.join("; "));
        Err(lines.join("\n      "))
    }
}

fn c8_modes(env: &Env, trained: &Trained) -> Check {
    let r = &trained.last;
    ensure!(
        r.zero_character.char_sim < r.char_sim,
        "zero_character char_sim {:.4} not below default {:.4}",
        r.zero_character.char_sim,
        r.char_sim
    );
    ensure!(
        r.zero_character.face_sim > r.baseline.face_sim,
        "zero_character face_sim {:.4} not above baseline {:.4}",
        r.zero_character.face_sim,
        r.baseline.face_sim
    );
    let eval_set = generate_eval_set(0).unwrap();
    let scenes: Vec<_> = (0..4).map(|i| eval_set.scene(i).unwrap()).collect();
    let bundles: Vec<_> = scenes.iter().map(|s| trained.model.conditioning(&env.encoders, &s.characters.iter().collect::<Vec<_>>(), false).unwrap()).collect();
    let captions: Vec<&[u32]> = scenes.iter().map(|s| s.caption.as_slice()).collect();
    let images = trained
        .model
        .generate(&env.vae, &env.encoders, Some(&bundles.iter().collect::<Vec<_>>()), &captions, None, CANVAS_SIZE, SamplerConfig::default())
        .map_err(|e| e.to_string())?;
    ensure!(images.len() == 4 && images.iter().all(|im| im.len() == 3 * CANVAS_SIZE * CANVAS_SIZE), "pose-ablated output has the wrong shape");
    ensure!(images.iter().flatten().all(|v| v.is_finite()), "pose-ablated output is not finite");
    let (a, b) = (&bundles[0], &bundles[1]);
    let at0 = interpolate_conditioning(a, b, 0.0).unwrap();
    let at1 = interpolate_conditioning(a, b, 1.0).unwrap();
    ensure!(bits(&at0.tokens) == bits(&a.tokens) && bits(&at1.tokens) == bits(&b.tokens), "interpolation endpoints are not exact");
    Ok(vec![
        format!(
            "zero_character: char_sim {:.4} < {:.4}, face_sim {:.4} > baseline {:.4}",
            r.zero_character.char_sim, r.char_sim, r.zero_character.face_sim, r.baseline.face_sim
        ),
        "pose-ablated sampling finite; interpolation endpoints exact".into(),
    ])
}

fn c9_determinism(env: &Env) -> Check {
    let config = TrainConfig { total_steps: 20, phase_boundary: 15, checkpoint_interval: 10, seed: 5, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut a = env.trainer(config.clone())?;
    let run_a = a.run(None, Some(dir.path())).map_err(|e| e.to_string())?;
    let mut b = env.trainer(config.clone())?;
    let run_b = b.run(None, None).map_err(|e| e.to_string())?;
    ensure!(run_a == run_b, "same-seed runs produced different loss reports");
    drop(b);

    let mut resumed = Trainer::resume(&dir.path().join("step_000010"), env.data.clone()).map_err(|e| e.to_string())?;
    let tail = resumed.run(None, None).map_err(|e| e.to_string())?;
    ensure!(tail == run_a[10..], "resumed run diverged from the uninterrupted one");
    ensure!(resumed.model.checksum().unwrap() == a.model.checksum().unwrap(), "resumed weights differ");

    let eval_set = generate_eval_set(0).unwrap();
    let cfg = EvalConfig { prompts_per_ref: 1, pair_scenes: 2, sampler: SamplerConfig { steps: 5, ..Default::default() }, ..Default::default() };
    let model = StoryModel::from_base(&env.base, 0).unwrap();
    let first = eval::eval_json(&model, &env.encoders, &env.vae, &eval_set, &cfg).map_err(|e| e.to_string())?;
    let second = eval::eval_json(&model, &env.encoders, &env.vae, &eval_set, &cfg).map_err(|e| e.to_string())?;
    ensure!(first.as_bytes() == second.as_bytes(), "evaluation JSON differs between runs");
    Ok(vec![format!("20-step loss sequences identical; resume after step 10 matches; eval JSON identical ({} bytes)", first.len())])
}

struct Outcome {
    id: usize,
    name: &'static str,
    limit: Duration,
    elapsed: Duration,
    result: Check,
}

fn run(id: usize, name: &'static str, limit_secs: u64, f: impl FnOnce() -> Check) -> Outcome {
    eprintln!("running criterion {id}: {name}");
    let started = Instant::now();
    let result = f();
    let o = Outcome { id, name, limit: Duration::from_secs(limit_secs), elapsed: started.elapsed(), result };
    print_outcome(&o);
    o
}

fn passed(o: &Outcome) -> bool {
    o.result.is_ok() && o.elapsed <= o.limit
}

fn print_outcome(o: &Outcome) {
    let verdict = if passed(o) { "PASS" } else { "FAIL" };
    println!("[{verdict}] {}. {} ({:.1} s, limit {} s)", o.id, o.name, o.elapsed.as_secs_f64(), o.limit.as_secs());
    match &o.result {
        Ok(lines) => lines.iter().for_each(|l| println!("      {l}")),
        Err(e) => println!("      {e}"),
    }
}

fn main() {
    // `cargo test -- --list` and name filters are harness flags; a filter that
    // excludes this suite skips it, and numeric arguments select checks.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (ids, names): (Vec<_>, Vec<_>) = args.iter().partition(|a| a.parse::<usize>().is_ok());
    if std::env::args().any(|a| a == "--list") || names.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let ids: Vec<usize> = ids.iter().map(|a| a.parse().unwrap()).collect();
    let want = |id: usize| ids.is_empty() || ids.contains(&id);

    let mut outcomes = Vec::new();
    let quick: [(usize, &'static str, u64, fn() -> Check); 5] = [
        (1, "shape contract", 10, c1_shape_contract),
        (2, "softmax partition", 30, c2_softmax_partition),
        (3, "gradient suite", 300, c3_gradients),
        (4, "degenerate identities", 60, c4_degenerate_identities),
        (5, "hand oracles", 10, c5_hand_oracles),
    ];
    for (id, name, limit, f) in quick {
        if want(id) {
            outcomes.push(run(id, name, limit, f));
        }
    }
    let slow = [(6, "frozen/trainable partition"), (7, "toy-training convergence"), (8, "mode contracts"), (9, "determinism and persistence")];
    if slow.iter().any(|&(id, _)| want(id)) {
        match Env::load() {
            Ok(env) => {
                if want(6) {
                    outcomes.push(run(6, "frozen/trainable partition", 300, || c6_partition(&env)));
                }
                if want(9) {
                    outcomes.push(run(9, "determinism and persistence", 1800, || c9_determinism(&env)));
                }
                if want(7) || want(8) {
                    let mut trained = None;
                    let c7 = run(7, "toy-training convergence", 2 * 3600 + 600, || c7_training(&env, &mut trained));
                    if want(7) {
                        outcomes.push(c7);
                    }
                    if want(8) {
                        outcomes.push(match &trained {
                            Some(t) => run(8, "mode contracts", 600, || c8_modes(&env, t)),
                            None => run(8, "mode contracts", 600, || Err("no trained checkpoint".into())),
                        });
                    }
                    if let Some(t) = &trained {
                        eprintln!("init eval: {}", serde_json::to_string(&t.init).unwrap());
                        eprintln!("final eval: {}", serde_json::to_string(&t.last).unwrap());
                    }
                }
            }
            Err(e) => {
                for (id, name) in slow.into_iter().filter(|&(id, _)| want(id)) {
                    outcomes.push(run(id, name, 0, || Err(format!("fixtures unavailable: {e}"))));
                }
            }
        }
    }
    outcomes.sort_by_key(|o| o.id);
    println!("\nacceptance summary");
    for o in &outcomes {
        println!("  [{}] {}. {}", if passed(o) { "PASS" } else { "FAIL" }, o.id, o.name);
    }
    let failed = outcomes.iter().filter(|o| !passed(o)).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
