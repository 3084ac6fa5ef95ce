//! Distillation objectives and their gradients.
//!
//! * supervised cross entropy against labels,
//! * KL divergence between temperature-softened teacher and student logits,
//! * a contrastive loss: cross entropy over cosine similarities between the
//!   student's CLS embeddings and projected teacher embeddings (one row per
//!   student sample, softmax over teacher rows).
//!
//! Every loss has a value-only form and a `*_grad` form returning analytic
//! partial derivatives.

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::error::{Error, Result};
use crate::model::{TruncatedNormal, INIT_STD};
use crate::real::{c, Real};

/// Guard for normalizing near-zero rows.
pub const NORM_EPS: f64 = 1e-8;

/// Learnable `D_s × D_t` map taking teacher embeddings into the student's
/// embedding space: `Ê_t = E_t · Wᵀ`. No bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights<T> {
    pub w: Array2<T>,
}

impl<T: Real> ProjectionWeights<T> {
    pub fn init(student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w: TruncatedNormal::new(INIT_STD).matrix(&mut rng, student_dim, teacher_dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self { w: Array2::eye(dim) }
    }

    pub fn student_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn teacher_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn element_count(&self) -> u64 {
        self.w.len() as u64
    }
}

/// Weights of the supervised and distillation terms; `alpha1 + alpha2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    alpha1: f64,
    alpha2: f64,
}

impl LossWeights {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        for (name, a) in [("alpha1", alpha1), ("alpha2", alpha2)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Validation(format!("{name} = {a} is outside [0, 1]")));
            }
        }
        if (alpha1 + alpha2 - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "alpha1 + alpha2 must equal 1, got {alpha1} + {alpha2}"
            )));
        }
        Ok(Self { alpha1, alpha2 })
    }

    /// `alpha1 = 1 - alpha2`.
    pub fn from_alpha2(alpha2: f64) -> Result<Self> {
        Self::new(1.0 - alpha2, alpha2)
    }

    pub fn supervised() -> Self {
        Self { alpha1: 1.0, alpha2: 0.0 }
    }

    pub fn alpha1(&self) -> f64 {
        self.alpha1
    }

    pub fn alpha2(&self) -> f64 {
        self.alpha2
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha1: 0.5, alpha2: 0.5 }
    }
}

/// Row-wise one-hot target matrix, stored as the column index of each row's 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetMatrix {
    cols: usize,
    targets: Vec<usize>,
}

impl TargetMatrix {
    /// `B × B` identity: sample i pairs with teacher row i.
    pub fn identity(batch: usize) -> Self {
        Self {
            cols: batch,
            targets: (0..batch).collect(),
        }
    }

    pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            cols: num_classes,
            targets: labels.to_vec(),
        })
    }

    /// Validates a dense 0/1 matrix with exactly one 1 per row.
    pub fn from_dense<T: Real>(dense: ArrayView2<T>) -> Result<Self> {
        let mut targets = Vec::with_capacity(dense.nrows());
        for (i, row) in dense.outer_iter().enumerate() {
            let mut hit = None;
            for (j, &v) in row.iter().enumerate() {
                if v == T::one() {
                    if hit.is_some() {
                        return Err(Error::Validation(format!("target row {i} has more than one 1")));
                    }
                    hit = Some(j);
                } else if v != T::zero() {
                    return Err(Error::Validation(format!("target row {i} has non-binary entry {v}")));
                }
            }
            targets.push(hit.ok_or_else(|| Error::Validation(format!("target row {i} has no 1")))?);
        }
        Ok(Self {
            cols: dense.ncols(),
            targets,
        })
    }

    pub fn to_dense<T: Real>(&self) -> Array2<T> {
        let mut m = Array2::zeros((self.rows(), self.cols));
        for (i, &j) in self.targets.iter().enumerate() {
            m[[i, j]] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn row_normalize<T: Real>(e: ArrayView2<T>, eps: f64) -> Array2<T> {
    let eps = c::<T>(eps);
    let mut out = e.to_owned();
    for mut row in out.outer_iter_mut() {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        row.mapv_inplace(|v| v / n);
    }
    out
}

fn row_normalize_backward<T: Real>(x: ArrayView2<T>, y: ArrayView2<T>, dy: ArrayView2<T>, eps: f64) -> Array2<T> {
    let eps = c::<T>(eps);
    let mut dx = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let norm = x.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
        let (yr, dyr) = (y.row(i), dy.row(i));
        let mut out = dx.row_mut(i);
        if norm > eps {
            let dot = yr.dot(&dyr);
            for j in 0..out.len() {
                out[j] = (dyr[j] - yr[j] * dot) / norm;
            }
        } else {
            out.assign(&dyr.mapv(|v| v / eps));
        }
    }
    dx
}

/// `Ê_t = E_t · Wᵀ`.
pub fn project_teacher<T: Real>(e_t: ArrayView2<T>, proj: &ProjectionWeights<T>) -> Result<Array2<T>> {
    if e_t.ncols() != proj.teacher_dim() {
        return Err(Error::Shape(format!(
            "teacher embeddings have {} columns, projection expects {}",
            e_t.ncols(),
            proj.teacher_dim()
        )));
    }
    Ok(e_t.dot(&proj.w.t()))
}

/// Gradient of a scalar with respect to `W` given its gradient `d_out` with
/// respect to `Ê_t = E_t · Wᵀ`: `dW = d_outᵀ · E_t`.
pub fn project_teacher_backward<T: Real>(e_t: ArrayView2<T>, d_out: ArrayView2<T>) -> Array2<T> {
    d_out.t().dot(&e_t)
}

fn check_inner<T>(e_s: &ArrayView2<T>, e_t_hat: &ArrayView2<T>) -> Result<()> {
    if e_s.ncols() != e_t_hat.ncols() {
        return Err(Error::Shape(format!(
            "student embeddings have {} columns, teacher embeddings {}",
            e_s.ncols(),
            e_t_hat.ncols()
        )));
    }
    Ok(())
}

/// Cosine-similarity matrix `norm(E_s) · norm(Ê_t)ᵀ`, `B × M`.
pub fn similarity_logits<T: Real>(e_s: ArrayView2<T>, e_t_hat: ArrayView2<T>, eps: f64) -> Result<Array2<T>> {
    check_inner(&e_s, &e_t_hat)?;
    Ok(row_normalize(e_s, eps).dot(&row_normalize(e_t_hat, eps).t()))
}

fn check_targets<T>(logits: &ArrayView2<T>, targets: &TargetMatrix) -> Result<()> {
    if logits.dim() != (targets.rows(), targets.cols()) {
        return Err(Error::Shape(format!(
            "logits are {:?}, targets are ({}, {})",
            logits.dim(),
            targets.rows(),
            targets.cols()
        )));
    }
    if targets.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

fn log_softmax_row<T: Real>(row: ndarray::ArrayView1<T>) -> Array1<T> {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.mapv(|v| v - lse)
}

/// Mean over rows of `-log softmax(row)[target]`.
pub fn cross_entropy_rows<T: Real>(logits: ArrayView2<T>, targets: &TargetMatrix) -> Result<T> {
    check_targets(&logits, targets)?;
    let total: T = logits
        .outer_iter()
        .zip(targets.targets())
        .map(|(row, &t)| -log_softmax_row(row)[t])
        .sum();
    Ok(total / c(targets.rows() as f64))
}

/// Value and `∂/∂logits = (softmax − onehot) / B`.
pub fn cross_entropy_rows_grad<T: Real>(logits: ArrayView2<T>, targets: &TargetMatrix) -> Result<(T, Array2<T>)> {
    check_targets(&logits, targets)?;
    let inv_b = c::<T>(1.0 / targets.rows() as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = T::zero();
    for ((row, &t), mut g) in logits.outer_iter().zip(targets.targets()).zip(grad.outer_iter_mut()) {
        let ls = log_softmax_row(row);
        total -= ls[t];
        g.assign(&ls.mapv(|v| v.exp() * inv_b));
        g[t] -= inv_b;
    }
    Ok((total * inv_b, grad))
}

/// Contrastive loss value and gradients with respect to both embedding sets.
#[derive(Debug, Clone)]
pub struct ClipGrad<T> {
    pub loss: T,
    pub d_student: Array2<T>,
    pub d_teacher: Array2<T>,
}

/// `CE(scale · norm(E_s)·norm(Ê_t)ᵀ, G)` with value and gradients.
pub fn clip_loss_grad<T: Real>(
    e_s: ArrayView2<T>,
    e_t_hat: ArrayView2<T>,
    targets: &TargetMatrix,
    eps: f64,
    scale: f64,
) -> Result<ClipGrad<T>> {
    check_inner(&e_s, &e_t_hat)?;
    let ns = row_normalize(e_s, eps);
    let nt = row_normalize(e_t_hat, eps);
    let scale_t = c::<T>(scale);
    let mut logits = ns.dot(&nt.t());
    logits *= scale_t;
    let (loss, mut d_logits) = cross_entropy_rows_grad(logits.view(), targets)?;
    d_logits *= scale_t;
    let d_ns = d_logits.dot(&nt);
    let d_nt = d_logits.t().dot(&ns);
    Ok(ClipGrad {
        loss,
        d_student: row_normalize_backward(e_s, ns.view(), d_ns.view(), eps),
        d_teacher: row_normalize_backward(e_t_hat, nt.view(), d_nt.view(), eps),
    })
}

/// `CE(norm(E_s)·norm(Ê_t)ᵀ, G)`.
pub fn clip_loss<T: Real>(
    e_s: ArrayView2<T>,
    e_t_hat: ArrayView2<T>,
    targets: &TargetMatrix,
    eps: f64,
) -> Result<T> {
    let sim = similarity_logits(e_s, e_t_hat, eps)?;
    cross_entropy_rows(sim.view(), targets)
}

fn check_kl<T>(z_s: &ArrayView2<T>, z_t: &ArrayView2<T>, temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Validation(format!("temperature must be positive, got {temperature}")));
    }
    if z_s.dim() != z_t.dim() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            z_s.dim(),
            z_t.dim()
        )));
    }
    if z_s.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// `T² · mean_b KL(softmax(z_t/T) ‖ softmax(z_s/T))` and its gradient in `z_s`.
pub fn kl_distill_loss_grad<T: Real>(
    z_s: ArrayView2<T>,
    z_t: ArrayView2<T>,
    temperature: f64,
) -> Result<(T, Array2<T>)> {
    check_kl(&z_s, &z_t, temperature)?;
    let temp = c::<T>(temperature);
    let inv_b = c::<T>(1.0 / z_s.nrows() as f64);
    let mut grad = Array2::zeros(z_s.raw_dim());
    let mut total = T::zero();
    for ((rs, rt), mut g) in z_s.outer_iter().zip(z_t.outer_iter()).zip(grad.outer_iter_mut()) {
        let log_q = log_softmax_row(rs.mapv(|v| v / temp).view());
        let log_p = log_softmax_row(rt.mapv(|v| v / temp).view());
        for j in 0..log_q.len() {
            let p = log_p[j].exp();
            if p > T::zero() {
                total += p * (log_p[j] - log_q[j]);
            }
            g[j] = temp * (log_q[j].exp() - p) * inv_b;
        }
    }
    Ok(((total * inv_b * temp * temp).max(T::zero()), grad))
}

pub fn kl_distill_loss<T: Real>(z_s: ArrayView2<T>, z_t: ArrayView2<T>, temperature: f64) -> Result<T> {
    Ok(kl_distill_loss_grad(z_s, z_t, temperature)?.0)
}

pub fn one_hot_targets(labels: &[usize], num_classes: usize) -> Result<TargetMatrix> {
    TargetMatrix::one_hot(labels, num_classes)
}

/// Mode-specific inputs to [`distillation_loss`].
#[derive(Debug, Clone, Copy)]
pub enum DistillAux<'a, T> {
    None,
    /// Teacher logits for logit-matching KD.
    TeacherLogits { z_t: ArrayView2<'a, T>, temperature: f64 },
    /// Student and projected teacher embeddings for the contrastive modes.
    Embeddings {
        e_s: ArrayView2<'a, T>,
        e_t_hat: ArrayView2<'a, T>,
        targets: &'a TargetMatrix,
        eps: f64,
        scale: f64,
    },
}

/// Named component losses; absent components are `None`, never zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kd: Option<f64>,
    pub loss_clip: Option<f64>,
}

/// Total loss, its components, and gradients with respect to every input
/// that the total depends on.
#[derive(Debug, Clone)]
pub struct DistillOutput<T> {
    pub breakdown: LossBreakdown,
    pub d_logits: Array2<T>,
    pub d_student_embedding: Option<Array2<T>>,
    pub d_teacher_embedding: Option<Array2<T>>,
}

/// `α₁·CE(z_s, ŷ) + α₂·term`, where the term is KL (regular-kd), the
/// contrastive loss (clip-teacher, clip-embed) or absent (supervised-only,
/// which always weights CE by 1).
pub fn distillation_loss<T: Real>(
    mode: Mode,
    z_s: ArrayView2<T>,
    labels: &[usize],
    aux: DistillAux<'_, T>,
    weights: LossWeights,
) -> Result<DistillOutput<T>> {
    let targets = TargetMatrix::one_hot(labels, z_s.ncols())?;
    let (ce, mut d_logits) = cross_entropy_rows_grad(z_s, &targets)?;
    let weights = if mode == Mode::SupervisedOnly {
        LossWeights::supervised()
    } else {
        weights
    };
    let (a1, a2) = (c::<T>(weights.alpha1), c::<T>(weights.alpha2));
    d_logits *= a1;
    let ce = ce.to_f64_lossy();
    let mut out = DistillOutput {
        breakdown: LossBreakdown {
            loss_total: weights.alpha1 * ce,
            loss_ce: ce,
            loss_kd: None,
            loss_clip: None,
        },
        d_logits,
        d_student_embedding: None,
        d_teacher_embedding: None,
    };
    match (mode, aux) {
        (Mode::SupervisedOnly, _) => {}
        (Mode::RegularKd, DistillAux::TeacherLogits { z_t, temperature }) => {
            let (kd, d_kd) = kl_distill_loss_grad(z_s, z_t, temperature)?;
            let kd = kd.to_f64_lossy();
            out.d_logits.scaled_add(a2, &d_kd);
            out.breakdown.loss_kd = Some(kd);
            out.breakdown.loss_total += weights.alpha2 * kd;
        }
        (
            Mode::ClipTeacher | Mode::ClipEmbed,
            DistillAux::Embeddings {
                e_s,
                e_t_hat,
                targets,
                eps,
                scale,
            },
        ) => {
            if e_s.nrows() != z_s.nrows() {
                return Err(Error::Shape("embedding and logit batch sizes differ".into()));
            }
            let g = clip_loss_grad(e_s, e_t_hat, targets, eps, scale)?;
            let clip = g.loss.to_f64_lossy();
            out.breakdown.loss_clip = Some(clip);
            out.breakdown.loss_total += weights.alpha2 * clip;
            out.d_student_embedding = Some(g.d_student * a2);
            out.d_teacher_embedding = Some(g.d_teacher * a2);
        }
        (mode, _) => {
            return Err(Error::Validation(format!(
                "{mode} loss is missing its teacher inputs"
            )))
        }
    }
    Ok(out)
}
