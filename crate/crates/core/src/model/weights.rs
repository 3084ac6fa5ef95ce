use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::Result;
use crate::real::{c, Real};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Parameters of one pre-norm transformer block. Linear maps act on row
/// vectors: `y = x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gamma: Array1<T>,
    pub ln1_beta: Array1<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln2_gamma: Array1<T>,
    pub ln2_beta: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// All learnable parameters of a ViT encoder plus classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    /// `patch_dim × embed_dim`
    pub patch_w: Array2<T>,
    pub patch_b: Array1<T>,
    pub cls_token: Array1<T>,
    /// `(num_patches + 1) × embed_dim`
    pub pos_embed: Array2<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_ln_gamma: Array1<T>,
    pub final_ln_beta: Array1<T>,
    /// `embed_dim × num_classes`
    pub head_w: Array2<T>,
    pub head_b: Array1<T>,
}

/// Samples N(0, std²) rejecting draws outside ±2·std.
pub(crate) struct TruncatedNormal {
    normal: Normal<f64>,
    bound: f64,
}

impl TruncatedNormal {
    pub(crate) fn new(std: f64) -> Self {
        Self {
            normal: Normal::new(0.0, std).expect("std is positive"),
            bound: 2.0 * std,
        }
    }

    pub(crate) fn sample<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        loop {
            let v = self.normal.sample(rng);
            if v.abs() <= self.bound {
                return v;
            }
        }
    }

    pub(crate) fn matrix<T: Real, R: rand::Rng>(&self, rng: &mut R, rows: usize, cols: usize) -> Array2<T> {
        Array2::from_shape_simple_fn((rows, cols), || c(self.sample(rng)))
    }

    pub(crate) fn vector<T: Real, R: rand::Rng>(&self, rng: &mut R, len: usize) -> Array1<T> {
        Array1::from_shape_simple_fn(len, || c(self.sample(rng)))
    }
}

impl<T: Real> LayerWeights<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, m) = (cfg.embed_dim, cfg.mlp_dim);
        Self {
            ln1_gamma: Array1::zeros(d),
            ln1_beta: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_gamma: Array1::zeros(d),
            ln2_beta: Array1::zeros(d),
            w1: Array2::zeros((d, m)),
            b1: Array1::zeros(m),
            w2: Array2::zeros((m, d)),
            b2: Array1::zeros(d),
        }
    }
}

impl<T: Real> ModelWeights<T> {
    /// Deterministic initialization: truncated normal (std 0.02, cut at ±2σ)
    /// for projections, CLS token and positional embeddings; ones/zeros for
    /// layer norms; zeros for every bias. Draws happen in `f64`, so the `f32`
    /// and `f64` models built from one seed agree up to rounding.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tn = TruncatedNormal::new(INIT_STD);
        let (d, m) = (config.embed_dim, config.mlp_dim);

        let patch_w = tn.matrix(&mut rng, config.patch_dim(), d);
        let cls_token = tn.vector(&mut rng, d);
        let pos_embed = tn.matrix(&mut rng, config.seq_len(), d);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                wq: tn.matrix(&mut rng, d, d),
                bq: Array1::zeros(d),
                wk: tn.matrix(&mut rng, d, d),
                bk: Array1::zeros(d),
                wv: tn.matrix(&mut rng, d, d),
                bv: Array1::zeros(d),
                wo: tn.matrix(&mut rng, d, d),
                bo: Array1::zeros(d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
                w1: tn.matrix(&mut rng, d, m),
                b1: Array1::zeros(m),
                w2: tn.matrix(&mut rng, m, d),
                b2: Array1::zeros(d),
            })
            .collect();
        let head_w = tn.matrix(&mut rng, d, config.num_classes);

        Ok(Self {
            config: *config,
            patch_w,
            patch_b: Array1::zeros(d),
            cls_token,
            pos_embed,
            layers,
            final_ln_gamma: Array1::ones(d),
            final_ln_beta: Array1::zeros(d),
            head_w,
            head_b: Array1::zeros(config.num_classes),
        })
    }

    /// All-zero tensors with the shapes implied by `config`; used as a
    /// gradient accumulator.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        Self {
            config: *config,
            patch_w: Array2::zeros((config.patch_dim(), d)),
            patch_b: Array1::zeros(d),
            cls_token: Array1::zeros(d),
            pos_embed: Array2::zeros((config.seq_len(), d)),
            layers: (0..config.layers).map(|_| LayerWeights::zeros(config)).collect(),
            final_ln_gamma: Array1::zeros(d),
            final_ln_beta: Array1::zeros(d),
            head_w: Array2::zeros((d, config.num_classes)),
            head_b: Array1::zeros(config.num_classes),
        }
    }

    /// Tensors in declaration order, the order used by checkpoints.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![
            ("patch_proj.weight".to_string(), self.patch_w.view().into_dyn()),
            ("patch_proj.bias".to_string(), self.patch_b.view().into_dyn()),
            ("cls_token".to_string(), self.cls_token.view().into_dyn()),
            ("pos_embed".to_string(), self.pos_embed.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.extend([
                (p("ln1.gamma"), l.ln1_gamma.view().into_dyn()),
                (p("ln1.beta"), l.ln1_beta.view().into_dyn()),
                (p("attn.wq"), l.wq.view().into_dyn()),
                (p("attn.bq"), l.bq.view().into_dyn()),
                (p("attn.wk"), l.wk.view().into_dyn()),
                (p("attn.bk"), l.bk.view().into_dyn()),
                (p("attn.wv"), l.wv.view().into_dyn()),
                (p("attn.bv"), l.bv.view().into_dyn()),
                (p("attn.wo"), l.wo.view().into_dyn()),
                (p("attn.bo"), l.bo.view().into_dyn()),
                (p("ln2.gamma"), l.ln2_gamma.view().into_dyn()),
                (p("ln2.beta"), l.ln2_beta.view().into_dyn()),
                (p("mlp.w1"), l.w1.view().into_dyn()),
                (p("mlp.b1"), l.b1.view().into_dyn()),
                (p("mlp.w2"), l.w2.view().into_dyn()),
                (p("mlp.b2"), l.b2.view().into_dyn()),
            ]);
        }
        out.extend([
            ("final_ln.gamma".to_string(), self.final_ln_gamma.view().into_dyn()),
            ("final_ln.beta".to_string(), self.final_ln_beta.view().into_dyn()),
            ("head.weight".to_string(), self.head_w.view().into_dyn()),
            ("head.bias".to_string(), self.head_b.view().into_dyn()),
        ]);
        out
    }

    /// Mutable counterpart of [`ModelWeights::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![
            ("patch_proj.weight".to_string(), self.patch_w.view_mut().into_dyn()),
            ("patch_proj.bias".to_string(), self.patch_b.view_mut().into_dyn()),
            ("cls_token".to_string(), self.cls_token.view_mut().into_dyn()),
            ("pos_embed".to_string(), self.pos_embed.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.extend([
                (p("ln1.gamma"), l.ln1_gamma.view_mut().into_dyn()),
                (p("ln1.beta"), l.ln1_beta.view_mut().into_dyn()),
                (p("attn.wq"), l.wq.view_mut().into_dyn()),
                (p("attn.bq"), l.bq.view_mut().into_dyn()),
                (p("attn.wk"), l.wk.view_mut().into_dyn()),
                (p("attn.bk"), l.bk.view_mut().into_dyn()),
                (p("attn.wv"), l.wv.view_mut().into_dyn()),
                (p("attn.bv"), l.bv.view_mut().into_dyn()),
                (p("attn.wo"), l.wo.view_mut().into_dyn()),
                (p("attn.bo"), l.bo.view_mut().into_dyn()),
                (p("ln2.gamma"), l.ln2_gamma.view_mut().into_dyn()),
                (p("ln2.beta"), l.ln2_beta.view_mut().into_dyn()),
                (p("mlp.w1"), l.w1.view_mut().into_dyn()),
                (p("mlp.b1"), l.b1.view_mut().into_dyn()),
                (p("mlp.w2"), l.w2.view_mut().into_dyn()),
                (p("mlp.b2"), l.b2.view_mut().into_dyn()),
            ]);
        }
        out.extend([
            ("final_ln.gamma".to_string(), self.final_ln_gamma.view_mut().into_dyn()),
            ("final_ln.beta".to_string(), self.final_ln_beta.view_mut().into_dyn()),
            ("head.weight".to_string(), self.head_w.view_mut().into_dyn()),
            ("head.bias".to_string(), self.head_b.view_mut().into_dyn()),
        ]);
        out
    }

    /// Element count summed over every tensor.
    pub fn element_count(&self) -> u64 {
        self.tensors().iter().map(|(_, t)| t.len() as u64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let mut out = ModelWeights::<U>::zeros(&self.config);
        for ((_, src), (_, mut dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            dst.zip_mut_with(&src, |d, s| *d = U::from_f64_lossy(s.to_f64_lossy()));
        }
        out
    }

    /// SHA-256 over the configuration and every tensor value (as LE `f64`).
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"edkd-weights");
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// `self += other · scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelWeights<T>, scale: T) {
        for ((_, mut dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.zip_mut_with(&src, |d, &s| *d += s * scale);
        }
    }
}

/// Parameter count from the formula in [`ModelConfig::param_count`].
pub fn param_count(config: &ModelConfig) -> u64 {
    config.param_count()
}
