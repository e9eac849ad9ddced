//! Pooling, the linear classifier and the cross-entropy loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Backward, BackwardCtx, ParamId, ParamStore, ParamTag, Tape, Tensor, Var};

struct PoolOp {
    input: [Var; 1],
    dims: [usize; 5],
}

impl<T: Real> Backward<T> for PoolOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn inputs(&self) -> &[Var] {
        &self.input
    }
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [b, t, c, h, w] = self.dims;
        let hw = h * w;
        let k = T::lit(1.0 / (t * hw) as f64);
        let mut gx = vec![T::zero(); b * t * c * hw];
        for bi in 0..b {
            for ti in 0..t {
                for ch in 0..c {
                    let v = g[bi * c + ch] * k;
                    let off = ((bi * t + ti) * c + ch) * hw;
                    gx[off..off + hw].iter_mut().for_each(|x| *x = v);
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Mean over `(T, H, W)`: `(B, T, C, H, W) -> (B, C)`.
pub fn global_avg_pool<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let dims: [usize; 5] = tape
        .shape(x)
        .try_into()
        .map_err(|_| Error::dim("global_avg_pool", format!("expected rank 5, got {:?}", tape.shape(x))))?;
    let [b, t, c, h, w] = dims;
    let hw = h * w;
    let n = T::lit((t * hw) as f64);
    let xs = tape.value(x);
    let mut out = vec![T::zero(); b * c];
    for bi in 0..b {
        for ti in 0..t {
            for ch in 0..c {
                let off = ((bi * t + ti) * c + ch) * hw;
                out[bi * c + ch] += xs[off..off + hw].iter().copied().sum::<T>();
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    tape.record(vec![b, c], out, Box::new(PoolOp { input: [x], dims }))
}

struct LinearOp {
    inputs: [Var; 3],
    b: usize,
    f: usize,
    n: usize,
}

impl<T: Real> Backward<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [xv, wv, _] = self.inputs;
        let (x, w) = (ctx.value(xv), ctx.value(wv));
        let (b, f, n) = (self.b, self.f, self.n);
        let gx = ctx.needs_grad(xv).then(|| {
            let mut gx = vec![T::zero(); b * f];
            for i in 0..b {
                for k in 0..n {
                    let gk = g[i * n + k];
                    let wrow = &w[k * f..(k + 1) * f];
                    for (a, &wj) in gx[i * f..(i + 1) * f].iter_mut().zip(wrow) {
                        *a += gk * wj;
                    }
                }
            }
            gx
        });
        let mut gw = vec![T::zero(); n * f];
        let mut gb = vec![T::zero(); n];
        for i in 0..b {
            let xrow = &x[i * f..(i + 1) * f];
            for k in 0..n {
                let gk = g[i * n + k];
                gb[k] += gk;
                for (a, &xj) in gw[k * f..(k + 1) * f].iter_mut().zip(xrow) {
                    *a += gk * xj;
                }
            }
        }
        vec![gx, Some(gw), Some(gb)]
    }
}

/// `logits = x · Wᵀ + b` with `x: (B, F)`, `W: (N, F)`, `b: (N)`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let (&[b, f], &[n, wf]) = (tape.shape(x), tape.shape(w)) else {
        return Err(Error::dim(
            "linear",
            format!("expected x (B,F) and W (N,F), got {:?} and {:?}", tape.shape(x), tape.shape(w)),
        ));
    };
    if wf != f {
        return Err(Error::dim("linear", format!("feature width {f} does not match weight width {wf}")));
    }
    if tape.shape(bias) != [n] {
        return Err(Error::dim("linear", format!("bias shape {:?}, expected [{n}]", tape.shape(bias))));
    }
    let (xs, ws, bs) = (tape.value(x), tape.value(w), tape.value(bias));
    let mut out = vec![T::zero(); b * n];
    for i in 0..b {
        let xrow = &xs[i * f..(i + 1) * f];
        for k in 0..n {
            let dot: T = xrow.iter().zip(&ws[k * f..(k + 1) * f]).map(|(&a, &c)| a * c).sum();
            out[i * n + k] = dot + bs[k];
        }
    }
    tape.record(vec![b, n], out, Box::new(LinearOp { inputs: [x, w, bias], b, f, n }))
}

/// Numerically stable row softmax of a `(B, N)` buffer.
pub fn softmax_rows<T: Real>(logits: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - m).exp()).collect();
        let s: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}

struct XentOp<T> {
    input: [Var; 1],
    probs: Vec<T>,
    labels: Vec<usize>,
    n: usize,
}

impl<T: Real> Backward<T> for XentOp<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn inputs(&self) -> &[Var] {
        &self.input
    }
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let scale = g[0] / T::lit(self.labels.len() as f64);
        let mut gx: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (i, &y) in self.labels.iter().enumerate() {
            gx[i * self.n + y] -= scale;
        }
        vec![Some(gx)]
    }
}

/// Batch-mean of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let &[b, n] = tape.shape(logits) else {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("expected (B,N) logits, got {:?}", tape.shape(logits)),
        ));
    };
    if labels.len() != b {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{} labels for a batch of {b}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Contract(format!("label {bad} out of range for {n} classes")));
    }
    let z = tape.value(logits);
    let mut loss = T::zero();
    for (row, &y) in z.chunks(n).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - row[y];
    }
    loss /= T::lit(b as f64);
    let probs = softmax_rows(z, n);
    let op = XentOp {
        input: [logits],
        probs,
        labels: labels.to_vec(),
        n,
    };
    tape.record(vec![1], vec![loss], Box::new(op))
}

/// Per-domain classifier: global pooling followed by a biased linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub features: usize,
    pub classes: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearHead {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        features: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (1.0 / features as f64).sqrt();
        let weight = store.insert(
            format!("{prefix}/weight"),
            ParamTag::Head,
            Tensor::uniform(&[classes, features], -bound, bound, rng).with_requires_grad(true),
        )?;
        let bias = store.insert(
            format!("{prefix}/bias"),
            ParamTag::Head,
            Tensor::zeros(&[classes]).with_requires_grad(true),
        )?;
        Ok(LinearHead {
            features,
            classes,
            weight,
            bias,
        })
    }

    pub fn num_params(&self) -> usize {
        self.classes * (self.features + 1)
    }

    /// Pools a clip feature map and returns `(B, classes)` logits.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let pooled = global_avg_pool(tape, features)?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        linear(tape, pooled, w, b)
    }
}
