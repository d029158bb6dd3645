#![allow(dead_code)]

use std::path::PathBuf;

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use storymaker_core::backbone::seeded_normal;
use storymaker_core::params::device;
use storymaker_core::Result;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn randn(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    seeded_normal(shape, &mut ChaCha8Rng::seed_from_u64(seed), dtype).unwrap()
}

pub fn var(shape: &[usize], seed: u64) -> Var {
    Var::from_tensor(&randn(shape, seed, DType::F64)).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Worst relative error, over the given variables, between autodiff
/// gradients of the scalar `f` and central differences with step `h`.
/// Relative error of one variable is `‖g_auto − g_fd‖ / max(‖g_auto‖, ‖g_fd‖)`.
pub fn max_gradient_error(vars: &[(String, Var)], h: f64, f: impl Fn() -> Result<Tensor>) -> (String, f64) {
    let grads = f().unwrap().backward().unwrap();
    let mut worst = (String::new(), 0.0);
    for (name, v) in vars {
        let auto = grads.get(v.as_tensor()).map(values).unwrap_or_else(|| vec![0.0; v.elem_count()]);
        let base = values(v.as_tensor());
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let probe = |delta: f64| {
                let mut x = base.clone();
                x[i] += delta;
                v.set(&Tensor::from_vec(x, v.shape(), &device()).unwrap()).unwrap();
                f().unwrap().to_scalar::<f64>().unwrap()
            };
            let (plus, minus) = (probe(h), probe(-h));
            numeric.push((plus - minus) / (2.0 * h));
        }
        v.set(&Tensor::from_vec(base, v.shape(), &device()).unwrap()).unwrap();
        let diff = auto.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm_a = auto.iter().map(|a| a * a).sum::<f64>().sqrt();
        let norm_n = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = norm_a.max(norm_n);
        assert!(denom > 1e-10, "{name}: gradient vanishes, the check would be vacuous");
        let rel = diff / denom;
        if rel >= worst.1 {
            worst = (name.clone(), rel);
        }
    }
    worst
}
