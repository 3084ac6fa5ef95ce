//! Independent scalar re-implementations used as test oracles.

use super::{rand_matrix, rng};
use edkd::data::{prepare_images, Dataset, Image};
use edkd::embed_cache::{build_cache_with, sample_per_class};
use edkd::losses::{cross_entropy_rows, similarity_logits, TargetMatrix, NORM_EPS};
use edkd::{ModelConfig, ModelWeights};
use ndarray::Array2;
use rand::Rng;

pub const INSTANCES: usize = 100;

fn scalar_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt().max(NORM_EPS) * nb.sqrt().max(NORM_EPS))
}

fn brute_force_ce(z: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let denom: f64 = (0..z.ncols()).map(|j| z[[r, j]].exp()).sum();
        total += -(z[[r, y]].exp() / denom).ln();
    }
    total / labels.len() as f64
}

/// Largest disagreement between the library and the oracle over all
/// instances.
pub fn similarity_worst() -> f64 {
    let mut worst = 0.0f64;
    let mut r = rng(1);
    for _ in 0..INSTANCES {
        let (b, m, d) = (r.random_range(1..7), r.random_range(1..7), r.random_range(1..7));
        let es = rand_matrix(&mut r, b, d);
        let et = rand_matrix(&mut r, m, d);
        let s = similarity_logits(es.view(), et.view(), NORM_EPS).unwrap();
        for i in 0..b {
            for j in 0..m {
                let o = scalar_cosine(es.row(i).as_slice().unwrap(), et.row(j).as_slice().unwrap());
                worst = worst.max((s[[i, j]] - o).abs());
            }
        }
    }
    worst
}

pub fn cross_entropy_worst() -> f64 {
    let mut worst = 0.0f64;
    let mut r = rng(2);
    for _ in 0..INSTANCES {
        let (b, m) = (r.random_range(1..7), r.random_range(1..7));
        let z = rand_matrix(&mut r, b, m) * 3.0;
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..m)).collect();
        let v = cross_entropy_rows(z.view(), &TargetMatrix::one_hot(&labels, m).unwrap()).unwrap();
        worst = worst.max((v - brute_force_ce(&z, &labels)).abs());
    }
    worst
}

fn random_dataset(r: &mut impl Rng, classes: usize, size: usize) -> Dataset {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..r.random_range(1..5) {
            let data = (0..size * size * 3).map(|_| r.random::<u8>()).collect();
            images.push(Image::new(size, size, data).unwrap());
            labels.push(c);
        }
    }
    Dataset::new("random", images, labels, classes).unwrap()
}

/// Each table row against a mean computed one image at a time, in two
/// passes (plain mean, then the mean residual added back).
pub fn cache_average_worst() -> f64 {
    let mut worst = 0.0f64;
    let mut r = rng(3);
    let cfg = ModelConfig::new(1, 8, 2, 16, 4, 8, 3);
    for instance in 0..INSTANCES {
        let teacher = ModelWeights::<f64>::init(&cfg, instance as u64).unwrap();
        let ds = random_dataset(&mut r, 3, 4);
        let n = r.random_range(1..4);
        let seed = r.random::<u64>();
        let cache = build_cache_with(&teacher, [1; 32], &ds, n, seed, r.random_range(1..5)).unwrap();
        for (class, idx) in sample_per_class(&ds, n, seed).unwrap().iter().enumerate() {
            let embeddings: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| {
                    let img = prepare_images(&ds, &[i], 8).mapv(f64::from);
                    teacher.forward(img.view()).unwrap().cls_embedding.row(0).to_vec()
                })
                .collect();
            let count = embeddings.len() as f64;
            for d in 0..8 {
                let mean = embeddings.iter().map(|e| e[d]).sum::<f64>() / count;
                let residual = embeddings.iter().map(|e| e[d] - mean).sum::<f64>() / count;
                let oracle = ((mean + residual) as f32) as f64;
                worst = worst.max((cache.table[[class, d]] as f64 - oracle).abs());
            }
        }
    }
    worst
}

