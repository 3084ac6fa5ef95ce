//! Pre-norm ViT forward pass and its hand-written reverse pass.
//!
//! Token activations for a batch are stored as one `(B·S) × D` matrix where
//! `S = num_patches + 1` and row `b·S` is sample `b`'s CLS position.
//!
//! ```text
//! x0     = [cls; patches·Wp + bp] + pos
//! block  : x = x + Attn(LN1(x));  x = x + MLP(LN2(x)),  MLP(a) = GELU(a·W1 + b1)·W2 + b2
//! E      = LNf(x[CLS])
//! logits = E·Wh + bh
//! ```

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::{LayerWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::real::{c, Real};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-6;

/// CLS embeddings and class logits for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    /// `B × embed_dim`
    pub cls_embedding: Array2<T>,
    /// `B × num_classes`
    pub logits: Array2<T>,
}

struct NormTrace<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

struct LayerTrace<T> {
    ln1: NormTrace<T>,
    a1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// One `S × S` row-stochastic matrix per (sample, head), sample-major.
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    ln2: NormTrace<T>,
    a2: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
}

/// Intermediate activations retained by [`ModelWeights::forward_train`].
pub struct ForwardTrace<T> {
    batch: usize,
    patches: Array2<T>,
    layers: Vec<LayerTrace<T>>,
    final_ln: NormTrace<T>,
    cls_embedding: Array2<T>,
}

impl<T> ForwardTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Splits an `H × W × 3` image into flattened `p × p` patches.
///
/// Patches are emitted in raster order; each vector is row-major within the
/// patch with channels last, so its length is `3·p²`.
pub fn patchify<T: Copy + num_traits::Zero>(image: ArrayView3<T>, patch_size: usize) -> Result<Array2<T>> {
    let (h, w, ch) = image.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!(
            "{h}×{w} image is not divisible into {patch_size}×{patch_size} patches"
        )));
    }
    let (ph, pw) = (h / patch_size, w / patch_size);
    let mut out = Array2::zeros((ph * pw, ch * patch_size * patch_size));
    for py in 0..ph {
        for px in 0..pw {
            let mut row = out.row_mut(py * pw + px);
            let mut i = 0;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    for k in 0..ch {
                        row[i] = image[[py * patch_size + dy, px * patch_size + dx, k]];
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn layer_norm<T: Real>(x: ArrayView2<T>, gamma: &Array1<T>, beta: &Array1<T>) -> (Array2<T>, NormTrace<T>) {
    let (rows, d) = x.dim();
    let inv_d = c::<T>(1.0 / d as f64);
    let eps = c::<T>(LN_EPS);
    let mut xhat = Array2::zeros((rows, d));
    let mut rstd = Array1::zeros(rows);
    for (r, (xr, mut hr)) in x.outer_iter().zip(xhat.outer_iter_mut()).enumerate() {
        let mean = xr.sum() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        hr.zip_mut_with(&xr, |h, &v| *h = (v - mean) * rs);
    }
    let mut y = xhat.clone();
    for mut yr in y.outer_iter_mut() {
        yr.zip_mut_with(gamma, |v, &g| *v *= g);
        yr += beta;
    }
    (y, NormTrace { xhat, rstd })
}

fn layer_norm_backward<T: Real>(
    dy: ArrayView2<T>,
    trace: &NormTrace<T>,
    gamma: &Array1<T>,
    dgamma: &mut Array1<T>,
    dbeta: &mut Array1<T>,
) -> Array2<T> {
    let (rows, d) = dy.dim();
    let inv_d = c::<T>(1.0 / d as f64);
    let mut dx = Array2::zeros((rows, d));
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = trace.xhat.row(r);
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            let dxh = dyr[j] * gamma[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let m1 = sum_dxh * inv_d;
        let m2 = sum_dxh_xh * inv_d;
        let rs = trace.rstd[r];
        let mut out = dx.row_mut(r);
        for j in 0..d {
            out[j] = rs * (dyr[j] * gamma[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

fn linear<T: Real>(x: ArrayView2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ dy` and returns `dy·Wᵀ`.
fn linear_backward<T: Real>(
    x: ArrayView2<T>,
    dy: ArrayView2<T>,
    w: &Array2<T>,
    dw: &mut Array2<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &x.t(), &dy, T::one(), dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu<T: Real>(u: T) -> T {
    c::<T>(0.5) * u * (T::one() + (u * c(INV_SQRT2)).erf())
}

fn gelu_grad<T: Real>(u: T) -> T {
    let cdf = c::<T>(0.5) * (T::one() + (u * c(INV_SQRT2)).erf());
    let pdf = c::<T>(INV_SQRT_2PI) * (-(u * u) * c(0.5)).exp();
    cdf + u * pdf
}

fn softmax_rows_in_place<T: Real>(m: &mut Array2<T>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl<T: Real> ModelWeights<T> {
    fn check_images(&self, images: &ArrayView4<T>) -> Result<usize> {
        let (b, h, w, ch) = images.dim();
        let size = self.config.image_size;
        if b == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if h != size || w != size || ch != 3 {
            return Err(Error::Shape(format!(
                "expected {size}×{size}×3 images, got {h}×{w}×{ch}"
            )));
        }
        Ok(b)
    }

    /// Inference forward pass; keeps no activations for backpropagation.
    pub fn forward(&self, images: ArrayView4<T>) -> Result<EncoderOutput<T>> {
        Ok(self.run(images, false)?.0)
    }

    /// Forward pass that also returns the activations needed by
    /// [`ModelWeights::backward`].
    pub fn forward_train(&self, images: ArrayView4<T>) -> Result<(EncoderOutput<T>, ForwardTrace<T>)> {
        let (out, trace) = self.run(images, true)?;
        Ok((out, trace.expect("trace requested")))
    }

    fn run(&self, images: ArrayView4<T>, keep: bool) -> Result<(EncoderOutput<T>, Option<ForwardTrace<T>>)> {
        let cfg = &self.config;
        let batch = self.check_images(&images)?;
        let (n, s, d) = (cfg.num_patches(), cfg.seq_len(), cfg.embed_dim);

        let mut patches = Array2::zeros((batch * n, cfg.patch_dim()));
        for (b, img) in images.outer_iter().enumerate() {
            let p = patchify(img, cfg.patch_size)?;
            patches.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&p);
        }
        let projected = linear(patches.view(), &self.patch_w, &self.patch_b);

        let mut x = Array2::zeros((batch * s, d));
        for b in 0..batch {
            let mut tok = x.slice_mut(s![b * s..(b + 1) * s, ..]);
            tok.row_mut(0).assign(&self.cls_token);
            tok.slice_mut(s![1.., ..]).assign(&projected.slice(s![b * n..(b + 1) * n, ..]));
            tok += &self.pos_embed;
        }
        drop(projected);

        let mut traces = Vec::with_capacity(if keep { cfg.layers } else { 0 });
        for layer in &self.layers {
            let trace = self.block(layer, &mut x, batch);
            if keep {
                traces.push(trace);
            }
        }

        let cls_rows = x.select(Axis(0), &(0..batch).map(|b| b * s).collect::<Vec<_>>());
        let (cls_embedding, final_ln) = layer_norm(cls_rows.view(), &self.final_ln_gamma, &self.final_ln_beta);
        let logits = linear(cls_embedding.view(), &self.head_w, &self.head_b);

        let trace = keep.then(|| ForwardTrace {
            batch,
            patches,
            layers: traces,
            final_ln,
            cls_embedding: cls_embedding.clone(),
        });
        Ok((EncoderOutput { cls_embedding, logits }, trace))
    }

    fn block(&self, w: &LayerWeights<T>, x: &mut Array2<T>, batch: usize) -> LayerTrace<T> {
        let cfg = &self.config;
        let (s, heads, dh) = (cfg.seq_len(), cfg.heads, cfg.head_dim());
        let scale = c::<T>(1.0 / (dh as f64).sqrt());

        let (a1, ln1) = layer_norm(x.view(), &w.ln1_gamma, &w.ln1_beta);
        let q = linear(a1.view(), &w.wq, &w.bq);
        let k = linear(a1.view(), &w.wk, &w.bk);
        let v = linear(a1.view(), &w.wv, &w.bv);

        let mut ctx = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rows = b * s..(b + 1) * s;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t());
                p *= scale;
                softmax_rows_in_place(&mut p);
                let mut out = ctx.slice_mut(s![rows.clone(), cols]);
                general_mat_mul(T::one(), &p, &vh, T::zero(), &mut out);
                probs.push(p);
            }
        }
        *x += &linear(ctx.view(), &w.wo, &w.bo);

        let (a2, ln2) = layer_norm(x.view(), &w.ln2_gamma, &w.ln2_beta);
        let u = linear(a2.view(), &w.w1, &w.b1);
        let g = u.mapv(gelu);
        *x += &linear(g.view(), &w.w2, &w.b2);

        LayerTrace {
            ln1,
            a1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            a2,
            u,
            g,
        }
    }

    /// Accumulates into `grads` the gradient of a scalar whose partials with
    /// respect to the CLS embeddings and logits are `d_embedding` and
    /// `d_logits` (either may be absent, meaning zero).
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        d_embedding: Option<ArrayView2<T>>,
        d_logits: Option<ArrayView2<T>>,
        grads: &mut ModelWeights<T>,
    ) -> Result<()> {
        let cfg = &self.config;
        let batch = trace.batch;
        let (n, s, d) = (cfg.num_patches(), cfg.seq_len(), cfg.embed_dim);
        if trace.layers.len() != cfg.layers {
            return Err(Error::Shape("trace was recorded without activations".into()));
        }
        if grads.config != *cfg {
            return Err(Error::Shape("gradient buffer has a different configuration".into()));
        }

        let mut d_emb = match d_embedding {
            Some(g) if g.dim() == (batch, d) => g.to_owned(),
            Some(g) => {
                return Err(Error::Shape(format!(
                    "embedding gradient is {:?}, expected ({batch}, {d})",
                    g.dim()
                )))
            }
            None => Array2::zeros((batch, d)),
        };
        if let Some(dz) = d_logits {
            if dz.dim() != (batch, cfg.num_classes) {
                return Err(Error::Shape(format!(
                    "logit gradient is {:?}, expected ({batch}, {})",
                    dz.dim(),
                    cfg.num_classes
                )));
            }
            d_emb += &linear_backward(
                trace.cls_embedding.view(),
                dz,
                &self.head_w,
                &mut grads.head_w,
                &mut grads.head_b,
            );
        }

        let d_cls = layer_norm_backward(
            d_emb.view(),
            &trace.final_ln,
            &self.final_ln_gamma,
            &mut grads.final_ln_gamma,
            &mut grads.final_ln_beta,
        );
        let mut dx = Array2::<T>::zeros((batch * s, d));
        for b in 0..batch {
            dx.row_mut(b * s).assign(&d_cls.row(b));
        }

        for ((w, t), g) in self
            .layers
            .iter()
            .zip(&trace.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            self.block_backward(w, t, g, &mut dx, batch);
        }

        for b in 0..batch {
            let tok = dx.slice(s![b * s..(b + 1) * s, ..]);
            grads.pos_embed += &tok;
            grads.cls_token += &tok.row(0);
        }
        let mut d_proj = Array2::zeros((batch * n, d));
        for b in 0..batch {
            d_proj
                .slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&dx.slice(s![b * s + 1..(b + 1) * s, ..]));
        }
        general_mat_mul(T::one(), &trace.patches.t(), &d_proj, T::one(), &mut grads.patch_w);
        grads.patch_b += &d_proj.sum_axis(Axis(0));
        Ok(())
    }

    fn block_backward(
        &self,
        w: &LayerWeights<T>,
        t: &LayerTrace<T>,
        g: &mut LayerWeights<T>,
        dx: &mut Array2<T>,
        batch: usize,
    ) {
        let cfg = &self.config;
        let (s, heads, dh) = (cfg.seq_len(), cfg.heads, cfg.head_dim());
        let scale = c::<T>(1.0 / (dh as f64).sqrt());

        // MLP branch
        let dgl = linear_backward(t.g.view(), dx.view(), &w.w2, &mut g.w2, &mut g.b2);
        let mut du = dgl;
        du.zip_mut_with(&t.u, |d, &u| *d *= gelu_grad(u));
        let da2 = linear_backward(t.a2.view(), du.view(), &w.w1, &mut g.w1, &mut g.b1);
        *dx += &layer_norm_backward(da2.view(), &t.ln2, &w.ln2_gamma, &mut g.ln2_gamma, &mut g.ln2_beta);

        // attention branch
        let dctx = linear_backward(t.ctx.view(), dx.view(), &w.wo, &mut g.wo, &mut g.bo);
        let mut dq = Array2::zeros(t.q.raw_dim());
        let mut dk = Array2::zeros(t.k.raw_dim());
        let mut dv = Array2::zeros(t.v.raw_dim());
        for b in 0..batch {
            let rows = b * s..(b + 1) * s;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &t.probs[b * heads + h];
                let dc = dctx.slice(s![rows.clone(), cols.clone()]);
                let qh = t.q.slice(s![rows.clone(), cols.clone()]);
                let kh = t.k.slice(s![rows.clone(), cols.clone()]);
                let vh = t.v.slice(s![rows.clone(), cols.clone()]);

                let mut dvh = dv.slice_mut(s![rows.clone(), cols.clone()]);
                general_mat_mul(T::one(), &p.t(), &dc, T::zero(), &mut dvh);

                let mut dscores = dc.dot(&vh.t());
                for (mut dr, pr) in dscores.outer_iter_mut().zip(p.outer_iter()) {
                    let dot = dr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    dr.zip_mut_with(&pr, |dv, &pv| *dv = pv * (*dv - dot));
                }
                dscores *= scale;

                let mut dqh = dq.slice_mut(s![rows.clone(), cols.clone()]);
                general_mat_mul(T::one(), &dscores, &kh, T::zero(), &mut dqh);
                let mut dkh = dk.slice_mut(s![rows.clone(), cols]);
                general_mat_mul(T::one(), &dscores.t(), &qh, T::zero(), &mut dkh);
            }
        }
        let mut da1 = linear_backward(t.a1.view(), dq.view(), &w.wq, &mut g.wq, &mut g.bq);
        da1 += &linear_backward(t.a1.view(), dk.view(), &w.wk, &mut g.wk, &mut g.bk);
        da1 += &linear_backward(t.a1.view(), dv.view(), &w.wv, &mut g.wv, &mut g.bv);
        *dx += &layer_norm_backward(da1.view(), &t.ln1, &w.ln1_gamma, &mut g.ln1_gamma, &mut g.ln1_beta);
    }
}
