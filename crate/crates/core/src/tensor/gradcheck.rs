use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the max relative error.
    pub rtol: f64,
    /// Lower bound on the relative-error denominator, so near-zero
    /// gradients are compared absolutely.
    pub floor: f64,
    /// Tensors with more coordinates than this are checked on a random subset of this size.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            rtol: 1e-4,
            floor: 1e-4,
            max_coords: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Max relative error per checked tensor, in argument order.
    pub per_tensor: Vec<f64>,
    /// (tensor index, coordinate, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
    pub rtol: f64,
    pub passed: bool,
}

/// Types that own a parameter store the checker can perturb in place.
pub trait HasParams<T: Real> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
}

impl<T: Real> HasParams<T> for ParamStore<T> {
    fn params(&self) -> &ParamStore<T> {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        self
    }
}

fn coords(n: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= opts.max_coords {
        (0..n).collect()
    } else {
        let mut idx = sample(rng, n, opts.max_coords).into_vec();
        idx.sort_unstable();
        idx
    }
}

struct Accumulator {
    report: GradCheckReport,
    floor: f64,
}

impl Accumulator {
    fn new(opts: &GradCheckOptions) -> Self {
        Accumulator {
            report: GradCheckReport {
                max_rel_err: 0.0,
                per_tensor: Vec::new(),
                worst: None,
                coords_checked: 0,
                rtol: opts.rtol,
                passed: true,
            },
            floor: opts.floor,
        }
    }

    fn start_tensor(&mut self) {
        self.report.per_tensor.push(0.0);
    }

    fn compare(&mut self, tensor: usize, coord: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(self.floor);
        let rel = (analytic - numeric).abs() / denom;
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        let slot = self.report.per_tensor.last_mut().expect("start_tensor called");
        *slot = slot.max(rel);
        if rel > self.report.max_rel_err || self.report.worst.is_none() {
            self.report.max_rel_err = rel.max(self.report.max_rel_err);
            self.report.worst = Some((tensor, coord, analytic, numeric));
        }
        self.report.coords_checked += 1;
    }

    fn finish(mut self) -> GradCheckReport {
        self.report.passed = self.report.max_rel_err <= self.report.rtol;
        self.report
    }
}

/// Compares tape gradients of a scalar function against central differences
/// with respect to every tensor in `inputs`.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.input(&t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.gradients(loss)?;

    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out)?.as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut acc = Accumulator::new(opts);
    let mut work: Vec<Tensor<T>> = inputs.iter().map(|t| t.clone().with_requires_grad(false)).collect();
    for (ti, var) in vars.iter().enumerate() {
        acc.start_tensor();
        let zeros = vec![T::zero(); inputs[ti].numel()];
        let analytic = grads.input(*var).unwrap_or(&zeros).to_vec();
        for c in coords(inputs[ti].numel(), opts, &mut rng) {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = T::lit(orig.as_f64() + opts.eps);
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = T::lit(orig.as_f64() - opts.eps);
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            acc.compare(ti, c, analytic[c].as_f64(), (plus - minus) / (2.0 * opts.eps));
        }
    }
    Ok(acc.finish())
}

/// Same check against every parameter of `state` that requires grad.
///
/// `f` builds the loss on the given tape and may mutate `state` (e.g. running
/// statistics); parameter values are restored after every perturbation.
pub fn finite_diff_check_params<T, S, F>(state: &mut S, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Real,
    S: HasParams<T>,
    F: FnMut(&mut S, &mut Tape<T>) -> Result<Var>,
{
    state.params_mut().zero_grad();
    let mut tape = Tape::new();
    let loss = f(state, &mut tape)?;
    tape.backward(loss, state.params_mut())?;

    let ids: Vec<ParamId> = state
        .params()
        .iter()
        .filter(|(_, p)| p.tensor.requires_grad())
        .map(|(id, _)| id)
        .collect();
    let analytic: Vec<Vec<T>> = ids
        .iter()
        .map(|&id| {
            let t = state.params().tensor(id);
            t.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()])
        })
        .collect();
    state.params_mut().zero_grad();

    let mut eval = |state: &mut S| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(state, &mut tape)?;
        Ok(tape.scalar(out)?.as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut acc = Accumulator::new(opts);
    for (ti, &id) in ids.iter().enumerate() {
        acc.start_tensor();
        let n = state.params().tensor(id).numel();
        for c in coords(n, opts, &mut rng) {
            let orig = state.params().tensor(id).data()[c];
            state.params_mut().tensor_mut(id).data_mut()[c] = T::lit(orig.as_f64() + opts.eps);
            let plus = eval(state)?;
            state.params_mut().tensor_mut(id).data_mut()[c] = T::lit(orig.as_f64() - opts.eps);
            let minus = eval(state)?;
            state.params_mut().tensor_mut(id).data_mut()[c] = orig;
            acc.compare(ti, c, analytic[ti][c].as_f64(), (plus - minus) / (2.0 * opts.eps));
        }
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use crate::tensor::{Backward, BackwardCtx};
    use rand::SeedableRng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[7], -2.0, 2.0, &mut rng);
        let rep = finite_diff_check(
            |t, v| {
                let sq = ops::mul(t, v[0], v[0])?;
                ops::sum(t, sq)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-6, "{rep:?}");
        assert!(rep.passed);
        assert_eq!(rep.coords_checked, 7);
    }

    struct WrongSquare([Var; 1]);

    impl Backward<f64> for WrongSquare {
        fn name(&self) -> &'static str {
            "wrong_square"
        }
        fn inputs(&self) -> &[Var] {
            &self.0
        }
        fn backward(&self, ctx: &BackwardCtx<'_, f64>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
            let x = ctx.value(self.0[0]);
            vec![Some(g.iter().zip(x).map(|(g, x)| -2.0 * x * g).collect())]
        }
    }

    #[test]
    fn sign_flipped_backward_is_caught() {
        let x = Tensor::<f64>::new(&[3], vec![0.5, 1.0, -2.0]).unwrap();
        let rep = finite_diff_check(
            |t, v| {
                let value = t.value(v[0]).iter().map(|x| x * x).collect();
                let sq = t.record(vec![3], value, Box::new(WrongSquare([v[0]])))?;
                ops::sum(t, sq)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!((rep.max_rel_err - 2.0).abs() < 1e-6, "{rep:?}");
        assert!(!rep.passed);
    }

    #[test]
    fn large_tensors_are_subsampled() {
        let x = Tensor::<f64>::ones(&[1000]);
        let opts = GradCheckOptions {
            max_coords: 50,
            ..Default::default()
        };
        let rep = finite_diff_check(|t, v| ops::sum(t, v[0]), &[x], &opts).unwrap();
        assert_eq!(rep.coords_checked, 50);
        assert!(rep.passed);
    }
}
