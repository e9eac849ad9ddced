//! Same-padded convolutions over `(B, T, C, H, W)` clips.
//!
//! One kernel covers all three adapter flavours: frame-wise 2D is `k_t = 1`,
//! temporal 1D is `k_h = k_w = 1`, full 3D uses all three extents. Temporal
//! stride is always 1 so `T` is preserved; spatial stride is only used by the
//! backbone's downsampling stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Backward, BackwardCtx, ParamId, ParamStore, ParamTag, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    Framewise2D,
    Full3D,
    Temporal1D,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geom {
    b: usize,
    t: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn infer(op: &'static str, x: &[usize], w: &[usize], stride: usize) -> Result<Self> {
        let [b, t, ci, h, wd] = *x else {
            return Err(Error::dim(op, format!("input must be rank 5 (B,T,C,H,W), got {x:?}")));
        };
        let [co, wci, kt, kh, kw] = *w else {
            return Err(Error::dim(op, format!("kernel must be rank 5 (Co,Ci,kt,kh,kw), got {w:?}")));
        };
        if wci != ci {
            return Err(Error::dim(
                op,
                format!("input has {ci} channels (axis 2) but kernel expects {wci} (axis 1)"),
            ));
        }
        if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(op, format!("kernel extents must be odd, got {kt}x{kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::dim(op, "stride must be positive"));
        }
        Ok(Geom {
            b,
            t,
            ci,
            h,
            w: wd,
            co,
            kt,
            kh,
            kw,
            sh: stride,
            sw: stride,
            ho: (h - 1) / stride + 1,
            wo: (wd - 1) / stride + 1,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.t, self.co, self.ho, self.wo]
    }

    /// Output columns `wo` whose source column `wo*sw + dw - pw` is in range.
    fn col_range(&self, dw: usize) -> (usize, usize) {
        let pw = self.kw / 2;
        let lo = if dw >= pw { 0 } else { (pw - dw).div_ceil(self.sw) };
        let hi_excl = if self.w + pw > dw {
            ((self.w - 1 + pw - dw) / self.sw + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }

    fn src_row(&self, ho: usize, dh: usize) -> Option<usize> {
        let r = (ho * self.sh + dh) as isize - (self.kh / 2) as isize;
        (r >= 0 && (r as usize) < self.h).then_some(r as usize)
    }

    fn src_frame(&self, to: usize, dt: usize) -> Option<usize> {
        let f = (to + dt) as isize - (self.kt / 2) as isize;
        (f >= 0 && (f as usize) < self.t).then_some(f as usize)
    }
}

impl Geom {
    /// Rows of the unfolded input: one per `(ci, dt, dh, dw)` tap, matching
    /// the flattened kernel layout.
    fn taps(&self) -> usize {
        self.ci * self.kt * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds the receptive fields of output frame `(b, to)` into `rows`, one
/// row of `taps` values per output pixel (zero where a tap hits padding).
fn im2row<T: Real>(g: &Geom, x: &[T], b: usize, to: usize, rows: &mut [T]) {
    let k = g.taps();
    let pw = g.kw / 2;
    rows.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..g.ci {
        for dt in 0..g.kt {
            let Some(ti) = g.src_frame(to, dt) else { continue };
            let in_plane = ((b * g.t + ti) * g.ci + ci) * g.h * g.w;
            for dh in 0..g.kh {
                for dw in 0..g.kw {
                    let (c0, c1) = g.col_range(dw);
                    let tap = ((ci * g.kt + dt) * g.kh + dh) * g.kw + dw;
                    for ho in 0..g.ho {
                        let Some(hi) = g.src_row(ho, dh) else { continue };
                        let src = in_plane + hi * g.w + dw;
                        for c in c0..c1 {
                            rows[(ho * g.wo + c) * k + tap] = x[src + c * g.sw - pw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2row`]: scatters `rows` back onto the input gradient.
fn row2im<T: Real>(g: &Geom, rows: &[T], b: usize, to: usize, gx: &mut [T]) {
    let k = g.taps();
    let pw = g.kw / 2;
    for ci in 0..g.ci {
        for dt in 0..g.kt {
            let Some(ti) = g.src_frame(to, dt) else { continue };
            let in_plane = ((b * g.t + ti) * g.ci + ci) * g.h * g.w;
            for dh in 0..g.kh {
                for dw in 0..g.kw {
                    let (c0, c1) = g.col_range(dw);
                    let tap = ((ci * g.kt + dt) * g.kh + dh) * g.kw + dw;
                    for ho in 0..g.ho {
                        let Some(hi) = g.src_row(ho, dh) else { continue };
                        let src = in_plane + hi * g.w + dw;
                        for c in c0..c1 {
                            gx[src + c * g.sw - pw] += rows[(ho * g.wo + c) * k + tap];
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four independent accumulators so the loop vectorises.
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: T = xc.remainder().iter().zip(yc.remainder()).map(|(&a, &b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for j in 0..4 {
            acc[j] += a[j] * b[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn conv_forward<T: Real>(g: &Geom, x: &[T], w: &[T]) -> Vec<T> {
    let (p, k) = (g.plane_out(), g.taps());
    let mut out = vec![T::zero(); g.b * g.t * g.co * p];
    let mut rows = vec![T::zero(); k * p];
    for b in 0..g.b {
        for to in 0..g.t {
            im2row(g, x, b, to, &mut rows);
            let frame = (b * g.t + to) * g.co * p;
            for (pi, r) in rows.chunks_exact(k).enumerate() {
                for (co, wrow) in w.chunks_exact(k).enumerate() {
                    out[frame + co * p + pi] = dot(wrow, r);
                }
            }
        }
    }
    out
}

struct ConvOp {
    inputs: [Var; 2],
    geom: Geom,
}

impl<T: Real> Backward<T> for ConvOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, gout: &[T]) -> Vec<Option<Vec<T>>> {
        let [xv, wv] = self.inputs;
        let (x, w) = (ctx.value(xv), ctx.value(wv));
        let g = &self.geom;
        let (p, k) = (g.plane_out(), g.taps());
        let want_x = ctx.needs_grad(xv);
        let want_w = ctx.needs_grad(wv);
        let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
        let mut gw = want_w.then(|| vec![T::zero(); w.len()]);
        let mut rows = vec![T::zero(); if want_w { k * p } else { 0 }];
        let mut grows = vec![T::zero(); if want_x { k * p } else { 0 }];
        for b in 0..g.b {
            for to in 0..g.t {
                let frame = (b * g.t + to) * g.co * p;
                let gframe = &gout[frame..frame + g.co * p];
                if let Some(gw) = gw.as_mut() {
                    im2row(g, x, b, to, &mut rows);
                    for (gwrow, gplane) in gw.chunks_exact_mut(k).zip(gframe.chunks_exact(p)) {
                        for (&go, r) in gplane.iter().zip(rows.chunks_exact(k)) {
                            if go != T::zero() {
                                axpy(go, r, gwrow);
                            }
                        }
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    grows.iter_mut().for_each(|v| *v = T::zero());
                    for (wrow, gplane) in w.chunks_exact(k).zip(gframe.chunks_exact(p)) {
                        for (&go, gr) in gplane.iter().zip(grows.chunks_exact_mut(k)) {
                            if go != T::zero() {
                                axpy(go, wrow, gr);
                            }
                        }
                    }
                    row2im(g, &grows, b, to, gx);
                }
            }
        }
        vec![gx, gw]
    }
}

/// General same-padded convolution with temporal stride 1 and spatial stride `stride`.
pub fn conv3d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, stride: usize) -> Result<Var> {
    let geom = Geom::infer("conv3d", tape.shape(x), tape.shape(w), stride)?;
    let out = conv_forward(&geom, tape.value(x), tape.value(w));
    tape.record(geom.out_shape(), out, Box::new(ConvOp { inputs: [x, w], geom }))
}

fn kernel_extents<T: Real>(tape: &Tape<T>, w: Var) -> (usize, usize, usize) {
    match *tape.shape(w) {
        [_, _, kt, kh, kw] => (kt, kh, kw),
        _ => (0, 0, 0),
    }
}

/// Applies a 2D kernel to every frame independently (`k_t = 1`).
pub fn conv_framewise_2d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var) -> Result<Var> {
    let (kt, _, _) = kernel_extents(tape, w);
    if kt != 1 {
        return Err(Error::dim(
            "conv_framewise_2d",
            format!("kernel temporal extent must be 1, got {kt}"),
        ));
    }
    conv3d(tape, x, w, 1).map_err(|e| rename(e, "conv_framewise_2d"))
}

/// Full spatio-temporal convolution.
pub fn conv_3d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var) -> Result<Var> {
    conv3d(tape, x, w, 1)
}

/// Mixes frames only; every pixel column is convolved independently.
pub fn conv_temporal_1d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var) -> Result<Var> {
    let (_, kh, kw) = kernel_extents(tape, w);
    if kh != 1 || kw != 1 {
        return Err(Error::dim(
            "conv_temporal_1d",
            format!("kernel spatial extent must be 1x1, got {kh}x{kw}"),
        ));
    }
    conv3d(tape, x, w, 1).map_err(|e| rename(e, "conv_temporal_1d"))
}

fn rename(e: Error, op: &'static str) -> Error {
    match e {
        Error::Dimension { detail, .. } => Error::Dimension { op, detail },
        other => other,
    }
}

/// A bias-free convolution layer whose weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub kind: ConvKind,
    pub c_out: usize,
    pub c_in: usize,
    pub k_t: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub weight: ParamId,
}

impl ConvKernel {
    /// Registers a He-uniform initialised kernel (`fan_in = C_in * k_t * k_h * k_w`).
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: impl Into<String>,
        tag: ParamTag,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        (k_t, k_h, k_w): (usize, usize, usize),
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match kind {
            ConvKind::Framewise2D if k_t != 1 => {
                return Err(Error::Config(format!("frame-wise kernel needs k_t = 1, got {k_t}")))
            }
            ConvKind::Temporal1D if k_h != 1 || k_w != 1 => {
                return Err(Error::Config(format!(
                    "temporal kernel needs k_h = k_w = 1, got {k_h}x{k_w}"
                )))
            }
            _ => {}
        }
        if [k_t, k_h, k_w].iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("kernel extents must be odd, got {k_t}x{k_h}x{k_w}")));
        }
        let fan_in = (c_in * k_t * k_h * k_w) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let shape = [c_out, c_in, k_t, k_h, k_w];
        let w = Tensor::uniform(&shape, -bound, bound, rng).with_requires_grad(true);
        let weight = store.insert(name, tag, w)?;
        Ok(ConvKernel {
            kind,
            c_out,
            c_in,
            k_t,
            k_h,
            k_w,
            stride,
            weight,
        })
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [self.c_out, self.c_in, self.k_t, self.k_h, self.k_w]
    }

    pub fn num_weights(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        match self.kind {
            ConvKind::Framewise2D if self.stride == 1 => conv_framewise_2d(tape, x, w),
            ConvKind::Temporal1D => conv_temporal_1d(tape, x, w),
            _ => conv3d(tape, x, w, self.stride),
        }
    }
}
