use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::{check_shape, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// Implementations keep whatever intermediates the backward pass needs.
pub trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> &[Var];

    /// One entry per input, in `inputs()` order. `None` skips that input.
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

/// Read access to forward values during the backward sweep.
pub struct BackwardCtx<'a, T: Real> {
    nodes: &'a [Node<T>],
    output: usize,
}

impl<T: Real> BackwardCtx<'_, T> {
    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn output(&self) -> &[T] {
        &self.nodes[self.output].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

enum Origin<T: Real> {
    Constant,
    Input,
    Param(ParamId),
    Op(Box<dyn Backward<T>>),
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    origin: Origin<T>,
}

/// Ordered record of forward operations; consumed by [`Tape::backward`].
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    recorded: usize,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recorded: 0,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the NaN/Inf scan performed on every op output.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Number of recorded operations (leaves are not counted).
    pub fn len(&self) -> usize {
        self.recorded
    }

    pub fn is_empty(&self) -> bool {
        self.recorded == 0
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, origin: Origin<T>) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            origin,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding a copy of `t`; gradients are tracked iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        let origin = if t.requires_grad() {
            Origin::Input
        } else {
            Origin::Constant
        };
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), origin)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        check_shape("constant", shape, value.len())?;
        Ok(self.push(shape.to_vec(), value, false, Origin::Constant))
    }

    /// Records a parameter leaf; gradient flows back into `store` on backward.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = &store.get(id).tensor;
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Origin::Param(id),
        )
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        match self.nodes[v.0].value.as_slice() {
            [x] => Ok(*x),
            other => Err(Error::Contract(format!(
                "expected a scalar, found {} elements",
                other.len()
            ))),
        }
    }

    /// Appends the result of an operation. The op is kept for backward only
    /// when at least one of its inputs requires grad.
    pub fn record(&mut self, shape: Vec<usize>, value: Vec<T>, op: Box<dyn Backward<T>>) -> Result<Var> {
        check_shape(op.name(), &shape, value.len())?;
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|&v| self.nodes[v.0].requires_grad);
        if requires_grad {
            self.recorded += 1;
            Ok(self.push(shape, value, true, Origin::Op(op)))
        } else {
            Ok(self.push(shape, value, false, Origin::Constant))
        }
    }

    /// Backpropagates from the scalar `loss`, accumulating (`+=`) parameter
    /// gradients into `store`. Gradients of requires-grad inputs are returned.
    pub fn backward(self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.sweep(loss)?;
        for (var, g) in &grads.params {
            store.get_mut(*var).tensor.accumulate_grad(g);
        }
        Ok(grads)
    }

    /// Backpropagates without a parameter store; parameter gradients are
    /// returned in [`Gradients`] instead of being accumulated.
    pub fn gradients(self, loss: Var) -> Result<Gradients<T>> {
        self.sweep(loss)
    }

    fn sweep(self, loss: Var) -> Result<Gradients<T>> {
        let Some(root) = self.nodes.get(loss.0) else {
            return Err(Error::Contract("loss is not on this tape".into()));
        };
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut out = Gradients {
            inputs: HashMap::new(),
            params: Vec::new(),
        };
        if !root.requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].origin {
                Origin::Constant => {}
                Origin::Input => {
                    out.inputs.insert(Var(idx), g);
                }
                Origin::Param(id) => out.params.push((*id, g)),
                Origin::Op(op) => {
                    let ctx = BackwardCtx {
                        nodes: &self.nodes,
                        output: idx,
                    };
                    let input_grads = op.backward(&ctx, &g);
                    debug_assert_eq!(input_grads.len(), op.inputs().len());
                    for (&input, ig) in op.inputs().iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), self.nodes[input.0].value.len(), "{}", op.name());
                        match &mut grads[input.0] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            slot => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    inputs: HashMap<Var, Vec<T>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T> Gradients<T> {
    /// Gradient of a requires-grad input leaf.
    pub fn input(&self, v: Var) -> Option<&[T]> {
        self.inputs.get(&v).map(Vec::as_slice)
    }

    /// Gradient of a parameter, summed over all of its uses on the tape.
    pub fn param(&self, id: ParamId) -> Option<Vec<T>>
    where
        T: Real,
    {
        let mut acc: Option<Vec<T>> = None;
        for (pid, g) in &self.params {
            if *pid != id {
                continue;
            }
            match &mut acc {
                Some(a) => a.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
                None => acc = Some(g.clone()),
            }
        }
        acc
    }
}
