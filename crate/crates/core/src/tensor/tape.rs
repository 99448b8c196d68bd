use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`
    Affine {
        x: Var,
        scale: f64,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Qcfs {
        x: Var,
        lambda: Var,
    },
    Spike {
        v: Var,
        theta: f64,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Upsample { input, .. } => vec![*input],
            Op::Sigmoid(x) | Op::Tanh(x) | Op::Sum(x) => vec![*x],
            Op::Affine { x, .. } | Op::Slice { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::Qcfs { x, lambda } => vec![*x, *lambda],
            Op::Spike { v, .. } => vec![*v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Whether threshold-like nonlinearities run their exact forward or the smooth
/// relaxation whose true derivative equals the surrogate used in backward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Relaxation {
    #[default]
    Exact,
    Relaxed,
}

/// Wengert list of executed ops. Values are immutable once recorded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    relaxation: Relaxation,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose QCFS and spike ops evaluate their continuous relaxations.
    /// Used for finite-difference checks of straight-through and surrogate paths.
    pub fn relaxed() -> Self {
        Self {
            relaxation: Relaxation::Relaxed,
            ..Self::default()
        }
    }

    pub fn relaxation(&self) -> Relaxation {
        self.relaxation
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push_op(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let value = ops::bilinear_upsample(self.value(input), factor)?;
        Ok(self.push_op(value, Op::Upsample { input, factor }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = ops::sigmoid(self.value(x));
        self.push_op(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = ops::tanh(self.value(x));
        self.push_op(value, Op::Tanh(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        Ok(self.push_op(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push_op(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push_op(value, Op::Mul(a, b)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push_op(value, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = ops::concat(&values, axis)?;
        Ok(self.push_op(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice_axis(self.value(x), axis, start, len)?;
        Ok(self.push_op(value, Op::Slice { x, axis, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op(value, Op::Sum(x))
    }

    /// Clip-floor activation with a learnable scalar ceiling `lambda`.
    ///
    /// Backward is straight-through: unit slope for `0 <= x <= lambda`, and the
    /// ceiling receives the gradient of elements clipped from above. On a
    /// relaxed tape the forward is `clip(x, 0, lambda)`, whose exact derivative
    /// is that rule.
    pub fn qcfs(&mut self, x: Var, lambda: Var, levels: usize, shift: f64) -> Result<Var> {
        let lam = self.value(lambda).item()?;
        if lam <= 0.0 || levels == 0 {
            return Err(Error::invalid(format!(
                "qcfs needs lambda > 0 and levels >= 1, got {lam} and {levels}"
            )));
        }
        let value = match self.relaxation {
            Relaxation::Exact => ops::qcfs(self.value(x), lam, levels, shift),
            Relaxation::Relaxed => ops::clip_relaxed(self.value(x), lam),
        };
        Ok(self.push_op(value, Op::Qcfs { x, lambda }))
    }

    /// Spike emission `H(v - theta)` with the arctan surrogate in backward.
    /// On a relaxed tape the forward is the arctan step itself.
    pub fn spike(&mut self, v: Var, theta: f64) -> Var {
        let value = match self.relaxation {
            Relaxation::Exact => ops::heaviside(self.value(v), theta),
            Relaxation::Relaxed => self.value(v).map(|x| ops::arctan_step(x - theta)),
        };
        self.push_op(value, Op::Spike { v, theta })
    }

    /// Records an op with a caller-supplied vector-Jacobian product. `backward`
    /// maps the upstream gradient to one optional gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        self.push_op(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Every leaf created with
    /// `requires_grad` ends up with a gradient, zero when unreachable.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Tape(format!("{:?} is not on this tape", loss)))?;
        if !loss_node.value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.vjp(&node.op, &node.value, &grad)?;
            self.grads[idx] = Some(grad);
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && self.grads[idx].is_none() {
                self.grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn vjp(&self, op: &Op, out: &Tensor, grad: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (gx, gw, gb) =
                    ops::conv2d_backward(val(input), val(weight), grad, *stride, *padding)?;
                let mut v = vec![(*input, gx), (*weight, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb.reshape(val(b).shape())?));
                }
                v
            }
            Op::Upsample { input, factor } => vec![(
                *input,
                ops::bilinear_upsample_backward(val(input).shape(), grad, *factor)?,
            )],
            Op::Sigmoid(x) => {
                let g = Tensor::from_fn(out.shape(), |i| {
                    let s = out.data()[i];
                    grad.data()[i] * s * (1.0 - s)
                });
                vec![(*x, g)]
            }
            Op::Tanh(x) => {
                let g = Tensor::from_fn(out.shape(), |i| {
                    let t = out.data()[i];
                    grad.data()[i] * (1.0 - t * t)
                });
                vec![(*x, g)]
            }
            Op::Add(a, b) => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Sub(a, b) => vec![(*a, grad.clone()), (*b, grad.map(|g| -g))],
            Op::Mul(a, b) => vec![
                (*a, ops::mul(grad, val(b))?),
                (*b, ops::mul(grad, val(a))?),
            ],
            Op::Affine { x, scale } => vec![(*x, grad.map(|g| g * scale))],
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                let mut v = Vec::with_capacity(inputs.len());
                for var in inputs {
                    let len = val(var).shape()[*axis];
                    v.push((*var, ops::slice_axis(grad, *axis, start, len)?));
                    start += len;
                }
                v
            }
            Op::Slice { x, axis, start } => {
                let shape = val(x).shape();
                let len = out.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut g = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = o * shape[*axis] * inner + start * inner;
                    let src = o * len * inner;
                    g.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&grad.data()[src..src + len * inner]);
                }
                vec![(*x, g)]
            }
            Op::Sum(x) => {
                let g = grad.item()?;
                vec![(*x, Tensor::full(val(x).shape(), g))]
            }
            Op::Qcfs { x, lambda } => {
                let lam = val(lambda).item()?;
                let (gx, glam) = ops::qcfs_backward(val(x), lam, grad);
                let glam = Tensor::full(val(lambda).shape(), glam);
                vec![(*x, gx), (*lambda, glam)]
            }
            Op::Spike { v, theta } => {
                let vv = val(v);
                let g = Tensor::from_fn(vv.shape(), |i| {
                    grad.data()[i] * ops::arctan_step_grad(vv.data()[i] - theta)
                });
                vec![(*v, g)]
            }
            Op::Custom { inputs, backward } => {
                let grads = backward(grad);
                if grads.len() != inputs.len() {
                    return Err(Error::Tape(format!(
                        "custom op returned {} gradients for {} inputs",
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(v, g)| g.map(|g| (*v, g)))
                    .collect()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn half_square_gives_identity() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[3, 5], |i| (i as f64).cos());
        let x = tape.leaf(xv.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert!(tape.grad(x).unwrap().max_abs_diff(&xv) < 1e-15);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let y = tape.leaf(Tensor::ones(&[3]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[4]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn spike_backward_uses_surrogate() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![3], vec![0.5, 1.0, 2.0]).unwrap(), true);
        let s = tape.spike(v, 1.0);
        assert_eq!(tape.value(s).data(), &[0.0, 1.0, 1.0]);
        let total = tape.sum(s);
        tape.backward(total).unwrap();
        let g = tape.grad(v).unwrap().data();
        for (gi, x) in g.iter().zip([-0.5, 0.0, 1.0]) {
            assert!((gi - ops::arctan_step_grad(x)).abs() < 1e-15);
        }
    }
}
