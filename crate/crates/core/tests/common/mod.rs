#![allow(dead_code)]

pub mod oracles;

use edkd::config::config_from_value;
use edkd::ExperimentConfig;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

/// Relative error with an absolute floor, so entries that are zero in both
/// do not blow up.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + h;
        let up = f(&xp);
        xp[[r, c]] = orig - h;
        let down = f(&xp);
        xp[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

pub fn max_rel_err(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
    a.iter().zip(n.iter()).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// 10-class 16 px synthetic task with a 2-layer, 64-dim student.
pub fn desk_config(mode: &str, per_class: usize, epochs: usize) -> serde_json::Value {
    json!({
        "name": mode,
        "mode": mode,
        "dataset": {"kind": "synthetic", "num_classes": 10, "per_class": per_class, "val_per_class": 20, "image_size": 16, "seed": 0},
        "student": {"layers": 2, "embed_dim": 64, "heads": 4, "mlp_dim": 128, "patch_size": 4},
        "epochs": epochs,
        "batch_size": 64,
        "base_lr": 1e-3,
        "student_image_size": 16,
        "teacher_image_size": 32
    })
}

/// A very small configuration for fast behavioral tests.
pub fn tiny_config(mode: &str, overrides: &[&str]) -> ExperimentConfig {
    let root = json!({
        "name": format!("tiny-{mode}"),
        "mode": mode,
        "dataset": {"kind": "synthetic", "num_classes": 4, "per_class": 6, "val_per_class": 3, "image_size": 8, "seed": 5},
        "student": {"layers": 1, "embed_dim": 16, "heads": 2, "mlp_dim": 32, "patch_size": 4},
        "teacher": {"layers": 1, "embed_dim": 24, "heads": 2, "mlp_dim": 32, "patch_size": 4, "init_seed": 11},
        "cache_path": "placeholder.edkc",
        "cache_samples_per_class": 3,
        "epochs": 2,
        "batch_size": 8,
        "base_lr": 1e-3,
        "student_image_size": 8,
        "teacher_image_size": 12
    });
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    config_from_value(root, &overrides).expect("tiny config is valid")
}
