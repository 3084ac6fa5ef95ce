//! Decoupled-weight-decay Adam and the cosine learning-rate schedule.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};

use crate::real::{c, Real};

/// `base_lr · ½ · (1 + cos(π · step / total_steps))`, clamped at 0.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let t = (step as f64 / total).min(1.0);
    (base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Real> AdamW<T> {
    /// Allocates zeroed moments shaped like `params`.
    pub fn new<'a>(cfg: AdamWConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (ArrayD::zeros(IxDyn(s)), ArrayD::zeros(IxDyn(s))))
            .unzip();
        Self { cfg, step: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of scalars held across both moment buffers.
    pub fn state_len(&self) -> usize {
        self.m.iter().chain(&self.v).map(ArrayD::len).sum()
    }

    /// One update: `p ← p·(1 − lr·wd) − lr · m̂ / (√v̂ + eps)`.
    pub fn update(&mut self, params: Vec<ArrayViewMutD<'_, T>>, grads: Vec<ArrayViewD<'_, T>>, lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count changed");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = c::<T>(1.0 - b1.powi(t));
        let bc2 = c::<T>(1.0 - b2.powi(t));
        let (b1, b2, eps) = (c::<T>(b1), c::<T>(b2), c::<T>(self.cfg.eps));
        let lr_t = c::<T>(lr);
        let decay = c::<T>(1.0 - lr * weight_decay);
        for (((mut p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p * decay - lr_t * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
