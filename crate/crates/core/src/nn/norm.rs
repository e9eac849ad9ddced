//! Batch and layer normalization over `(B, T, C, H, W)` clips.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Backward, BackwardCtx, ParamId, ParamStore, ParamTag, Tape, Tensor, Var};

use super::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

fn clip_dims(op: &'static str, shape: &[usize]) -> Result<[usize; 5]> {
    shape
        .try_into()
        .map_err(|_| Error::dim(op, format!("expected rank-5 (B,T,C,H,W) input, got {shape:?}")))
}

fn check_affine<T: Real>(tape: &Tape<T>, op: &'static str, c: usize, gamma: Var, beta: Var) -> Result<()> {
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if tape.shape(v) != [c] {
            return Err(Error::dim(
                op,
                format!("{name} has shape {:?}, expected [{c}] (channel axis 2)", tape.shape(v)),
            ));
        }
    }
    Ok(())
}

/// Visits the contiguous `H*W` plane of each (b, t, c) in order.
fn planes(dims: [usize; 5]) -> impl Iterator<Item = (usize, usize, usize)> {
    let [b, t, c, h, w] = dims;
    let hw = h * w;
    (0..b * t).flat_map(move |bt| (0..c).map(move |ch| (bt, ch, (bt * c + ch) * hw)))
}

struct BatchNormTrain<T> {
    inputs: [Var; 3],
    dims: [usize; 5],
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for BatchNormTrain<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [b, t, c, h, w] = self.dims;
        let hw = h * w;
        let n = T::lit((b * t * hw) as f64);
        let gamma = ctx.value(self.inputs[1]);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (_, ch, off) in planes(self.dims) {
            for (&gi, &xi) in g[off..off + hw].iter().zip(&self.xhat[off..off + hw]) {
                sum_g[ch] += gi;
                sum_gx[ch] += gi * xi;
            }
        }
        let gx = ctx.needs_grad(self.inputs[0]).then(|| {
            let mut gx = vec![T::zero(); g.len()];
            for (_, ch, off) in planes(self.dims) {
                let k = gamma[ch] * self.inv_std[ch] / n;
                let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
                for i in off..off + hw {
                    gx[i] = k * (n * g[i] - sg - self.xhat[i] * sgx);
                }
            }
            gx
        });
        vec![gx, Some(sum_gx), Some(sum_g)]
    }
}

struct AffineEval<T> {
    inputs: [Var; 3],
    dims: [usize; 5],
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for AffineEval<T> {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let c = self.dims[2];
        let hw = self.dims[3] * self.dims[4];
        let gamma = ctx.value(self.inputs[1]);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        let mut gx = vec![T::zero(); g.len()];
        for (_, ch, off) in planes(self.dims) {
            let k = gamma[ch] * self.inv_std[ch];
            for i in off..off + hw {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * self.xhat[i];
                gx[i] = k * g[i];
            }
        }
        vec![Some(gx), Some(sum_gx), Some(sum_g)]
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// Training-mode batch norm: normalises each channel over `(B, T, H, W)`
/// with batch statistics.
pub fn batch_norm_train<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, BatchStats<T>)> {
    let dims = clip_dims("batch_norm", tape.shape(x))?;
    let [b, t, c, h, w] = dims;
    check_affine(tape, "batch_norm", c, gamma, beta)?;
    let hw = h * w;
    let count = b * t * hw;
    let n = T::lit(count as f64);
    let xs = tape.value(x);
    let mut mean = vec![T::zero(); c];
    for (_, ch, off) in planes(dims) {
        mean[ch] += xs[off..off + hw].iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); c];
    for (_, ch, off) in planes(dims) {
        let m = mean[ch];
        var[ch] += xs[off..off + hw].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std: Vec<T> = var.iter().map(|&v| (v + T::lit(eps)).sqrt().recip()).collect();
    let (gv, bv) = (tape.value(gamma), tape.value(beta));
    let mut xhat = vec![T::zero(); xs.len()];
    let mut out = vec![T::zero(); xs.len()];
    for (_, ch, off) in planes(dims) {
        for i in off..off + hw {
            xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
            out[i] = gv[ch] * xhat[i] + bv[ch];
        }
    }
    let op = BatchNormTrain {
        inputs: [x, gamma, beta],
        dims,
        xhat,
        inv_std,
    };
    let y = tape.record(dims.to_vec(), out, Box::new(op))?;
    Ok((y, BatchStats { mean, var, count }))
}

/// Eval-mode batch norm: a fixed per-channel affine map from running statistics.
pub fn batch_norm_eval<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Var> {
    let dims = clip_dims("batch_norm", tape.shape(x))?;
    let c = dims[2];
    check_affine(tape, "batch_norm", c, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::dim("batch_norm", "running statistics do not match channel count"));
    }
    let hw = dims[3] * dims[4];
    let inv_std: Vec<T> = running_var.iter().map(|&v| (v + T::lit(eps)).sqrt().recip()).collect();
    let xs = tape.value(x);
    let (gv, bv) = (tape.value(gamma), tape.value(beta));
    let mut xhat = vec![T::zero(); xs.len()];
    let mut out = vec![T::zero(); xs.len()];
    for (_, ch, off) in planes(dims) {
        for i in off..off + hw {
            xhat[i] = (xs[i] - running_mean[ch]) * inv_std[ch];
            out[i] = gv[ch] * xhat[i] + bv[ch];
        }
    }
    let op = AffineEval {
        inputs: [x, gamma, beta],
        dims,
        xhat,
        inv_std,
    };
    tape.record(dims.to_vec(), out, Box::new(op))
}

struct LayerNormOp<T> {
    inputs: [Var; 3],
    dims: [usize; 5],
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for LayerNormOp<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [_, _, c, h, w] = self.dims;
        let hw = h * w;
        let slice = c * hw;
        let n = T::lit(slice as f64);
        let gamma = ctx.value(self.inputs[1]);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        let mut gx = vec![T::zero(); g.len()];
        for (s, &inv) in self.inv_std.iter().enumerate() {
            let base = s * slice;
            let mut a = T::zero();
            let mut bsum = T::zero();
            for ch in 0..c {
                let off = base + ch * hw;
                for i in off..off + hw {
                    let gh = g[i] * gamma[ch];
                    a += gh;
                    bsum += gh * self.xhat[i];
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * self.xhat[i];
                }
            }
            let k = inv / n;
            for ch in 0..c {
                let off = base + ch * hw;
                for i in off..off + hw {
                    gx[i] = k * (n * g[i] * gamma[ch] - a - self.xhat[i] * bsum);
                }
            }
        }
        vec![Some(gx), Some(sum_gx), Some(sum_g)]
    }
}

/// Normalises each `(sample, frame)` slice over `(C, H, W)` and applies a
/// per-channel affine map.
pub fn layer_norm<T: Real>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let dims = clip_dims("layer_norm", tape.shape(x))?;
    let [b, t, c, h, w] = dims;
    check_affine(tape, "layer_norm", c, gamma, beta)?;
    let hw = h * w;
    let slice = c * hw;
    let n = T::lit(slice as f64);
    let xs = tape.value(x);
    let (gv, bv) = (tape.value(gamma), tape.value(beta));
    let mut xhat = vec![T::zero(); xs.len()];
    let mut out = vec![T::zero(); xs.len()];
    let mut inv_std = Vec::with_capacity(b * t);
    for s in 0..b * t {
        let seg = &xs[s * slice..(s + 1) * slice];
        let mean = seg.iter().copied().sum::<T>() / n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = (var + T::lit(eps)).sqrt().recip();
        inv_std.push(inv);
        for ch in 0..c {
            for j in 0..hw {
                let i = s * slice + ch * hw + j;
                xhat[i] = (xs[i] - mean) * inv;
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
        }
    }
    let op = LayerNormOp {
        inputs: [x, gamma, beta],
        dims,
        xhat,
        inv_std,
    };
    tape.record(dims.to_vec(), out, Box::new(op))
}

/// Batch norm layer with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNorm<T> {
    /// Registers `{prefix}/gamma` and `{prefix}/beta` with the given initial scale.
    pub fn init(store: &mut ParamStore<T>, prefix: &str, tag: ParamTag, channels: usize, gamma0: f64) -> Result<Self> {
        let gamma = store.insert(
            format!("{prefix}/gamma"),
            tag,
            Tensor::full(&[channels], T::lit(gamma0)).with_requires_grad(true),
        )?;
        let beta = store.insert(
            format!("{prefix}/beta"),
            tag,
            Tensor::zeros(&[channels]).with_requires_grad(true),
        )?;
        Ok(BatchNorm {
            channels,
            gamma,
            beta,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    /// Train mode also folds the batch statistics into the running estimates
    /// (unbiased variance, exponential moving average).
    pub fn forward(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut stats = RunningStats {
            mean: std::mem::take(&mut self.running_mean),
            var: std::mem::take(&mut self.running_var),
        };
        let y = self.forward_with_stats(tape, store, x, mode, &mut stats);
        self.running_mean = stats.mean;
        self.running_var = stats.var;
        y
    }

    /// Same as [`BatchNorm::forward`] but reads and updates external running
    /// statistics instead of the layer's own.
    pub fn forward_with_stats(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        running: &mut RunningStats<T>,
    ) -> Result<Var> {
        if running.mean.len() != self.channels || running.var.len() != self.channels {
            return Err(Error::dim("batch_norm", "running statistics do not match channel count"));
        }
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = batch_norm_train(tape, x, gamma, beta, self.eps)?;
                let m = T::lit(self.momentum);
                let keep = T::one() - m;
                let unbias = if stats.count > 1 {
                    T::lit(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                for ch in 0..self.channels {
                    running.mean[ch] = keep * running.mean[ch] + m * stats.mean[ch];
                    running.var[ch] = keep * running.var[ch] + m * stats.var[ch] * unbias;
                }
                Ok(y)
            }
            Mode::Eval => batch_norm_eval(tape, x, gamma, beta, &running.mean, &running.var, self.eps),
        }
    }
}

/// Running mean and variance of a batch norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    /// Mean 0, variance 1.
    pub fn fresh(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Layer norm with per-channel scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    /// Skip normalisation entirely; used by identity-at-initialisation checks.
    pub passthrough: bool,
}

impl LayerNorm {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, tag: ParamTag, channels: usize) -> Result<Self> {
        let gamma = store.insert(
            format!("{prefix}/gamma"),
            tag,
            Tensor::ones(&[channels]).with_requires_grad(true),
        )?;
        let beta = store.insert(
            format!("{prefix}/beta"),
            tag,
            Tensor::zeros(&[channels]).with_requires_grad(true),
        )?;
        Ok(LayerNorm {
            channels,
            gamma,
            beta,
            eps: LN_EPS,
            passthrough: false,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if self.passthrough {
            return Ok(x);
        }
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        layer_norm(tape, x, gamma, beta, self.eps)
    }
}
