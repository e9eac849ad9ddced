//! Elementwise and reduction primitives.

use super::tape::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::dim(op, format!("operand shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

struct AddOp([Var; 2]);

impl<T: Real> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn inputs(&self) -> &[Var] {
        &self.0
    }
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

/// Elementwise `a + b`; shapes must match exactly.
pub fn add<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "add", a, b)?;
    let value = tape
        .value(a)
        .iter()
        .zip(tape.value(b))
        .map(|(&x, &y)| x + y)
        .collect();
    let shape = tape.shape(a).to_vec();
    tape.record(shape, value, Box::new(AddOp([a, b])))
}

struct MulOp([Var; 2]);

impl<T: Real> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn inputs(&self) -> &[Var] {
        &self.0
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [a, b] = self.0;
        let prod = |other: Var| -> Vec<T> {
            g.iter().zip(ctx.value(other)).map(|(&gi, &o)| gi * o).collect()
        };
        vec![
            ctx.needs_grad(a).then(|| prod(b)),
            ctx.needs_grad(b).then(|| prod(a)),
        ]
    }
}

/// Elementwise `a * b`; shapes must match exactly.
pub fn mul<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "mul", a, b)?;
    let value = tape
        .value(a)
        .iter()
        .zip(tape.value(b))
        .map(|(&x, &y)| x * y)
        .collect();
    let shape = tape.shape(a).to_vec();
    tape.record(shape, value, Box::new(MulOp([a, b])))
}

struct ScaleOp<T> {
    input: [Var; 1],
    factor: T,
}

impl<T: Real> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn inputs(&self) -> &[Var] {
        &self.input
    }
    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&x| x * self.factor).collect())]
    }
}

/// `factor * a`.
pub fn scale<T: Real>(tape: &mut Tape<T>, a: Var, factor: T) -> Result<Var> {
    let value = tape.value(a).iter().map(|&x| x * factor).collect();
    let shape = tape.shape(a).to_vec();
    tape.record(shape, value, Box::new(ScaleOp { input: [a], factor }))
}

struct SumOp([Var; 1]);

impl<T: Real> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn inputs(&self) -> &[Var] {
        &self.0
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let n = ctx.value(self.0[0]).len();
        vec![Some(vec![g[0]; n])]
    }
}

/// Sum of all elements, as a `[1]`-shaped scalar.
pub fn sum<T: Real>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let s = tape.value(a).iter().copied().sum();
    tape.record(vec![1], vec![s], Box::new(SumOp([a])))
}

struct ReluOp([Var; 1]);

impl<T: Real> Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn inputs(&self) -> &[Var] {
        &self.0
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = ctx.value(self.0[0]);
        vec![Some(
            g.iter()
                .zip(x)
                .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                .collect(),
        )]
    }
}

/// `max(a, 0)` elementwise.
/// `max(x, 0)`, propagating NaN.
pub fn relu<T: Real>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let value = tape
        .value(a)
        .iter()
        .map(|&x| if x < T::zero() { T::zero() } else { x })
        .collect();
    let shape = tape.shape(a).to_vec();
    tape.record(shape, value, Box::new(ReluOp([a])))
}
