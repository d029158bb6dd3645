mod common;

use candle_core::{DType, Tensor};
use proptest::prelude::*;
use storymaker_core::attention::{apply_lora, row_sums, AttentionConfig, DecoupledCrossAttention, LoraDelta};
use storymaker_core::params::{device, ParamStore};
use storymaker_core::ppr::{ConditioningBatch, ConditioningBundle};

use common::randn;

const L: usize = 2;

fn layer(seed: u64) -> (ParamStore, DecoupledCrossAttention) {
    let cfg = AttentionConfig {
        query_dim: 8,
        text_dim: 6,
        image_dim: 6,
        heads: 2,
        lora_rank: Some(2),
        image_prompt: true,
    };
    let mut store = ParamStore::new(DType::F64, seed);
    let attn = DecoupledCrossAttention::new(&mut store.root().pp("attn"), cfg).unwrap();
    // Non-zero LoRA so the deltas take part.
    for n in store.names().filter(|n| n.ends_with("lora_up")).map(String::from).collect::<Vec<_>>() {
        let t = store.tensor(&n).unwrap();
        store.assign(&n, &(randn(t.dims(), seed + 1, DType::F64) * 0.3).unwrap()).unwrap();
    }
    (store, attn)
}

fn batch(counts: &[usize], seed: u64) -> ConditioningBatch {
    let bundles: Vec<_> = counts
        .iter()
        .enumerate()
        .map(|(i, &n)| ConditioningBundle {
            tokens: randn(&[(n + 1) * L, 6], seed + i as u64, DType::F64),
            num_characters: n,
            tokens_per_region: L,
            dim: 6,
        })
        .collect();
    ConditioningBatch::from_bundles(&bundles.iter().collect::<Vec<_>>()).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn probabilities_are_row_stochastic(counts in prop::collection::vec(1usize..=2, 1..4), side in 1usize..4, seed in 0u64..500) {
        let (_, attn) = layer(seed);
        let b = counts.len();
        let img = batch(&counts, seed * 10);
        let z = randn(&[b, side * side, 8], seed + 3, DType::F64);
        let text = randn(&[b, 5, 6], seed + 4, DType::F64);
        let (y, rec) = attn.attend(&z, &text, Some(&img), Some((0, side, side))).unwrap();
        prop_assert_eq!(y.dims(), z.dims());
        let rec = rec.unwrap();
        for s in row_sums(&rec.probs).unwrap() {
            prop_assert!((s - 1.0).abs() < 1e-9, "row sums to {}", s);
        }
        let probs = rec.probs.to_vec3::<f64>().unwrap();
        let maps = rec.maps.to_vec3::<f64>().unwrap();
        for (i, &n) in counts.iter().enumerate() {
            // Padded prompt rows receive no mass; real regions share all of it.
            for row in &probs[i] {
                prop_assert!(row[(n + 1) * L..].iter().all(|&p| p < 1e-12));
            }
            for q in 0..side * side {
                let total: f64 = (0..=n).map(|k| maps[i][k][q]).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn zero_image_values_leave_text_attention() {
    let (store, attn) = layer(1);
    for n in ["attn.to_v_ip.weight", "attn.to_v_ip.lora_up"] {
        let t = store.tensor(n).unwrap().zeros_like().unwrap();
        store.assign(n, &t).unwrap();
    }
    let z = randn(&[2, 4, 8], 5, DType::F64);
    let text = randn(&[2, 3, 6], 6, DType::F64);
    let (with_image, _) = attn.attend(&z, &text, Some(&batch(&[1, 2], 7)), None).unwrap();
    let (text_only, _) = attn.attend(&z, &text, None, None).unwrap();
    let diff = values(&(with_image - text_only).unwrap()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn constant_keys_spread_attention_evenly() {
    let (store, attn) = layer(2);
    for n in ["attn.to_k_ip.weight", "attn.to_k_ip.lora_up"] {
        let t = store.tensor(n).unwrap().zeros_like().unwrap();
        store.assign(n, &t).unwrap();
    }
    let z = randn(&[2, 4, 8], 5, DType::F64);
    let text = randn(&[2, 3, 6], 6, DType::F64);
    let (_, rec) = attn.attend(&z, &text, Some(&batch(&[1, 2], 9)), Some((0, 2, 2))).unwrap();
    let maps = rec.unwrap().maps.to_vec3::<f64>().unwrap();
    for (i, n) in [1usize, 2].into_iter().enumerate() {
        for k in 0..=n {
            assert!(maps[i][k].iter().all(|&v| (v - 1.0 / (n + 1) as f64).abs() < 1e-12));
        }
    }
}

#[test]
fn lora_matches_dense_oracle() {
    let dev = device();
    let w = randn(&[5, 3], 1, DType::F64);
    let down = randn(&[5, 2], 2, DType::F64);
    let up = randn(&[2, 3], 3, DType::F64);
    let delta = LoraDelta { down: down.clone(), up: up.clone(), scale: 0.5 };
    let got = apply_lora(&w, &delta).unwrap().to_vec2::<f64>().unwrap();
    let (w, a, b) = (w.to_vec2::<f64>().unwrap(), down.to_vec2::<f64>().unwrap(), up.to_vec2::<f64>().unwrap());
    for i in 0..5 {
        for j in 0..3 {
            let want = w[i][j] + 0.5 * (0..2).map(|r| a[i][r] * b[r][j]).sum::<f64>();
            assert!((got[i][j] - want).abs() < 1e-6);
        }
    }
    let bad = LoraDelta { down, up: Tensor::zeros((2, 4), DType::F64, &dev).unwrap(), scale: 1.0 };
    assert!(apply_lora(&randn(&[5, 3], 1, DType::F64), &bad).is_err());
}

#[test]
fn record_requires_matching_grid() {
    let (_, attn) = layer(3);
    let z = randn(&[1, 4, 8], 1, DType::F64);
    let text = randn(&[1, 3, 6], 2, DType::F64);
    assert!(attn.attend(&z, &text, Some(&batch(&[1], 1)), Some((0, 3, 3))).is_err());
    assert!(attn.attend(&z, &text, Some(&batch(&[1, 1], 1)), None).is_err());
}
