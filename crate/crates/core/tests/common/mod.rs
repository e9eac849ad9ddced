//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use mdl_core::tensor::{ops, GradCheckOptions, Tape, Tensor, Var};
use mdl_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Direct same-padded convolution, one output element at a time.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [b, t, ci, h, wd] = <[usize; 5]>::try_from(x.shape()).unwrap();
    let [co, wci, kt, kh, kw] = <[usize; 5]>::try_from(w.shape()).unwrap();
    assert_eq!(ci, wci);
    let ho = h.div_ceil(stride);
    let wo = wd.div_ceil(stride);
    let (pt, ph, pw) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut out = Tensor::zeros(&[b, t, co, ho, wo]);
    for bi in 0..b {
        for to in 0..t {
            for o in 0..co {
                for y in 0..ho {
                    for z in 0..wo {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let ti = to as isize + dt as isize - pt;
                                        let hi = (y * stride) as isize + dh as isize - ph;
                                        let wi = (z * stride) as isize + dw as isize - pw;
                                        if ti < 0 || hi < 0 || wi < 0 {
                                            continue;
                                        }
                                        let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                                        if ti >= t || hi >= h || wi >= wd {
                                            continue;
                                        }
                                        acc += x.at(&[bi, ti, i, hi, wi]) * w.at(&[o, i, dt, dh, dw]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[bi, to, o, y, z]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Naive triple-loop `x · Wᵀ + b`.
pub fn linear_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (bs, f) = (x.shape()[0], x.shape()[1]);
    let n = w.shape()[0];
    let mut out = vec![0.0; bs * n];
    for i in 0..bs {
        for k in 0..n {
            let mut acc = 0.0;
            for j in 0..f {
                acc += x.at(&[i, j]) * w.at(&[k, j]);
            }
            out[i * n + k] = acc + b[k];
        }
    }
    out
}

/// Error-free transformation `a + b = s + e`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Cross-entropy with double-double accumulation of the partition sum.
pub fn xent_oracle(logits: &[f64], labels: &[usize], n: usize) -> f64 {
    let mut total = (0.0, 0.0);
    for (row, &y) in logits.chunks(n).zip(labels) {
        let zy = row[y];
        let mut terms: Vec<f64> = row.iter().map(|&z| (z - zy).exp()).collect();
        terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (mut hi, mut lo) = (0.0, 0.0);
        for t in terms {
            let (s, e) = two_sum(hi, t);
            hi = s;
            lo += e;
        }
        // log(hi + lo) = log(hi) + log1p(lo / hi)
        let l = hi.ln() + (lo / hi).ln_1p();
        let (s, e) = two_sum(total.0, l);
        total = (s, total.1 + e);
    }
    (total.0 + total.1) / labels.len() as f64
}

/// Weighted sum `Σ r_i y_i` with fixed random weights, so every output
/// coordinate influences the scalar used for gradient checks.
pub fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let weights: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let c = tape.constant(&shape, weights)?;
    let m = ops::mul(tape, y, c)?;
    ops::sum(tape, m)
}

pub fn strict() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        rtol: 1e-4,
        ..Default::default()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
