mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use storymaker_core::backbone::{SamplerConfig, Vae};
use storymaker_core::encoders::Encoders;
use storymaker_core::eval::{
    diagonal_dominance, eval_cases, evaluate, leakage_matrix, probe_iou, probe_iou_canvas, reference_self_report, EvalConfig, ProbedMaps,
};
use storymaker_core::losses::downsample_mask;
use storymaker_core::story::{ModelConfig, StoryModel};
use storymaker_core::synthdata::{generate_eval_set, generate_pair_eval_set};

use common::fixture;

/// Per-pixel softmax over `regions` rows of logits, as attention would give.
fn partition(logits: &[f32], regions: usize, px: usize) -> Vec<Vec<f32>> {
    let mut maps = vec![vec![0f32; px]; regions];
    for p in 0..px {
        let col: Vec<f32> = (0..regions).map(|r| logits[r * px + p].exp()).collect();
        let z: f32 = col.iter().sum();
        for r in 0..regions {
            maps[r][p] = col[r] / z;
        }
    }
    maps
}

#[test]
fn maps_equal_to_pooled_masks_score_one_at_every_layer() {
    let pairs = generate_pair_eval_set(3, 1).unwrap();
    for i in 0..pairs.len() {
        let scene = pairs.scene(i).unwrap();
        let sides = vec![2, 4, 8];
        let layer_maps: Vec<Vec<Vec<f32>>> = sides
            .iter()
            .map(|&side| scene.masks.iter().map(|m| downsample_mask(m, scene.canvas_size(), side).unwrap()).collect())
            .collect();
        let probe = ProbedMaps { sides, maps: vec![layer_maps.clone(), layer_maps] };
        assert_eq!(probe_iou(&probe, &scene).unwrap(), vec![1.0; 3]);
        let canvas = probe_iou_canvas(&probe, &scene);
        assert!(canvas[0] < 1.0 && canvas.iter().all(|v| (0.0..=1.0).contains(v)), "{canvas:?}");
    }
}

proptest! {
    #[test]
    fn leakage_columns_of_partitioning_maps_sum_to_one(
        logits in prop::collection::vec(-4.0f32..4.0, 27),
        masks in prop::collection::vec(0.0f32..1.0, 27),
    ) {
        let maps = partition(&logits, 3, 9);
        let masks: Vec<Vec<f32>> = masks.chunks(9).map(<[f32]>::to_vec).collect();
        let l = leakage_matrix(&maps, &masks);
        for k in 0..3 {
            let col: f64 = (0..3).map(|j| l[j][k]).sum();
            prop_assert!((col - 1.0).abs() < 1e-5, "column {} sums to {}", k, col);
            prop_assert!((0..3).all(|j| (0.0..=1.0 + 1e-6).contains(&l[j][k])));
        }
    }

    #[test]
    fn area_weighted_leakage_rows_recover_total_attention(
        logits in prop::collection::vec(-4.0f32..4.0, 27),
        mask_logits in prop::collection::vec(-4.0f32..4.0, 27),
    ) {
        let maps = partition(&logits, 3, 9);
        let masks = partition(&mask_logits, 3, 9);
        let l = leakage_matrix(&maps, &masks);
        for j in 0..3 {
            let weighted: f64 = (0..3).map(|k| l[j][k] * masks[k].iter().map(|&v| v as f64).sum::<f64>()).sum();
            let total: f64 = maps[j].iter().map(|&v| v as f64).sum();
            prop_assert!((weighted - total).abs() < 1e-4, "row {}: {} vs {}", j, weighted, total);
        }
    }

    #[test]
    fn dominance_ignores_region_relabelling(
        entries in prop::collection::vec(0.0f64..1.0, 9),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let l: Vec<Vec<f64>> = entries.chunks(3).map(<[f64]>::to_vec).collect();
        let relabelled: Vec<Vec<f64>> = perm.iter().map(|&j| perm.iter().map(|&k| l[j][k]).collect()).collect();
        prop_assert!((diagonal_dominance(&l) - diagonal_dominance(&relabelled)).abs() < 1e-12);
    }
}

#[test]
fn dominance_of_reference_matrices() {
    let identity = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    assert_eq!(diagonal_dominance(&identity), 1.0);
    let uniform = vec![vec![1.0 / 3.0; 3]; 3];
    assert!(diagonal_dominance(&uniform).abs() < 1e-12);
}

#[test]
fn eval_targets_keep_characters_and_move_them() {
    let set = generate_eval_set(0).unwrap();
    let cases = eval_cases(&set, 3, 9).unwrap();
    assert_eq!(cases.len(), 3 * set.len());
    for c in &cases {
        for (r, t) in c.reference.characters.iter().zip(&c.target.characters) {
            assert_eq!((r.identity_id, r.clothing_id), (t.identity_id, t.clothing_id));
        }
        assert_ne!(c.reference.spec.background_id, c.target.spec.background_id);
        assert_ne!(c.reference.spec.pose_seed, c.target.spec.pose_seed);
    }
    assert!(eval_cases(&set, 0, 9).is_err());
}

#[test]
fn references_score_perfectly_against_themselves() {
    let enc = Encoders::load(&fixture("encoders")).unwrap();
    let s = reference_self_report(&enc, &generate_eval_set(0).unwrap()).unwrap();
    assert!((s.face_sim - 1.0).abs() < 1e-5 && (s.char_sim - 1.0).abs() < 1e-5, "{s:?}");
    assert!(s.clip_t_analog.is_finite());
}

#[test]
fn untrained_model_yields_finite_metrics() {
    let enc = Encoders::load(&fixture("encoders")).unwrap();
    let (vae, _) = Vae::load(&fixture("vae")).unwrap();
    let model = StoryModel::build(BTreeMap::new(), 1, ModelConfig::default()).unwrap();
    let config = EvalConfig {
        prompts_per_ref: 1,
        sampler: SamplerConfig { steps: 2, ..Default::default() },
        probe_timesteps: vec![500],
        pair_scenes: 1,
        ..Default::default()
    };
    let pairs = generate_pair_eval_set(1, 0).unwrap();
    let r = evaluate(&model, &enc, &vae, &generate_eval_set(0).unwrap(), &pairs, &config).unwrap();
    assert_eq!(r.n_samples, 8);
    for v in [r.face_sim, r.char_sim, r.clip_t_analog, r.attn_iou, r.baseline.face_sim, r.zero_character.char_sim, r.leakage.diagonal_dominance] {
        assert!(v.is_finite());
    }
    assert!((0.0..=1.0).contains(&r.attn_iou));
    assert_eq!(r.leakage.matrix.len(), 3);
}
