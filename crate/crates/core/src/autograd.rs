//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node. `backward` walks the nodes in strict reverse
//! recording order and accumulates gradients additively, so a value consumed
//! by k ops receives the sum of k contributions.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels::{self, Padding};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module.
pub trait BackwardRule {
    fn name(&self) -> &str;

    /// Gradient for each input, in the order the inputs were recorded.
    /// `None` means "no contribution".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: Padding },
    ConvTranspose2d { x: Var, w: Var },
    MaxPool { x: Var, argmax: Vec<u8> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, alpha: f64 },
    Concat { parts: Vec<Var> },
    Stack { parts: Vec<Var> },
    Gather { x: Var, indices: Vec<usize> },
    Blur { x: Var, weights: Vec<f64> },
    Custom { inputs: Vec<Var>, rule: Box<dyn BackwardRule> },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat_channels",
            Op::Stack { .. } => "stack",
            Op::Gather { .. } => "gather",
            Op::Blur { .. } => "gaussian_blur2d",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. Single owner; one training step records onto one tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed back.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(op))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op.name(), &value)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ConvTranspose2d { x, w } => vec![*x, *w],
            Op::Add { a, b } => vec![*a, *b],
            Op::MaxPool { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Scale { x, .. }
            | Op::Gather { x, .. }
            | Op::Blur { x, .. } => vec![*x],
            Op::Concat { parts } | Op::Stack { parts } => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Constant leaf: no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: Padding) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), pad)?;
        self.push(out, Op::Conv2d { x, w, b, pad })
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = kernels::conv_transpose2d(self.value(x), self.value(w))?;
        self.push(out, Op::ConvTranspose2d { x, w })
    }

    /// 2x2 max-pool; the chosen window positions are returned alongside.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<(Var, Vec<u8>)> {
        let (out, argmax) = kernels::maxpool2x2(self.value(x))?;
        let v = self.push(out, Op::MaxPool { x, argmax: argmax.clone() })?;
        Ok((v, argmax))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).axpy(1.0, self.value(b))?;
        self.push(out, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let out = self.value(x).scale(alpha);
        self.push(out, Op::Scale { x, alpha })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        self.push(out, Op::Concat { parts: parts.to_vec() })
    }

    /// Stack equally shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::stack(&values)?;
        self.push(out, Op::Stack { parts: parts.to_vec() })
    }

    /// `out[i] = x.flat[indices[i]]`, reshaped to `shape`. Backward scatter-adds.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len());
        for &i in &indices {
            data.push(*src.get(i).ok_or_else(|| Error::Index {
                index: i,
                len: src.len(),
            })?);
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(out, Op::Gather { x, indices })
    }

    /// Gaussian blur with fixed (non-trainable) weights.
    pub fn gaussian_blur2d(&mut self, x: Var, sigma: f64) -> Result<Var> {
        let weights = kernels::gaussian_kernel(sigma)?;
        let out = kernels::gaussian_blur2d(self.value(x), &weights)?;
        self.push(out, Op::Blur { x, weights })
    }

    /// Record an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn BackwardRule>) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Fingerprint of every discrete choice made during the forward pass
    /// (gather indices, pooling winners, ReLU activity). Finite-difference
    /// checks compare fingerprints to skip perturbations that flip a choice.
    pub fn decision_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Gather { indices, .. } => (i, indices).hash(&mut h),
                Op::MaxPool { argmax, .. } => (i, argmax).hash(&mut h),
                Op::Relu { x } => {
                    i.hash(&mut h);
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Backpropagate from a single-element output.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let value = self.value(root);
        if value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with(root, Tensor::full(value.shape(), 1.0))
    }

    /// Backpropagate an arbitrary output cotangent.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shape("backward seed shape differs from root"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            grads[idx] = Some(g);
            for (v, c) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                check_finite(node.op.name(), &c)?;
                accumulate(&mut grads[v.0], c);
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *pad, needs(*x))?;
                let mut v = vec![(*w, dw)];
                if let Some(dx) = dx {
                    v.push((*x, dx));
                }
                if let Some(b) = b {
                    v.push((*b, db));
                }
                v
            }
            Op::ConvTranspose2d { x, w } => {
                let (dx, dw) = kernels::conv_transpose2d_backward(self.value(*x), self.value(*w), g, needs(*x))?;
                let mut v = vec![(*w, dw)];
                if let Some(dx) = dx {
                    v.push((*x, dx));
                }
                v
            }
            Op::MaxPool { x, argmax } => {
                vec![(*x, kernels::maxpool2x2_backward(self.value(*x).shape(), argmax, g))]
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = g.data().iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                vec![(*x, Tensor::from_parts_unchecked(g.shape().to_vec(), d))]
            }
            Op::Sigmoid { x: xv } => {
                let y = node.value.data();
                let d: Vec<f64> = g.data().iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(*xv, Tensor::from_parts_unchecked(g.shape().to_vec(), d))]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale { x, alpha } => vec![(*x, g.scale(*alpha))],
            Op::Concat { parts } => {
                let channels: Vec<usize> = parts.iter().map(|p| self.value(*p).shape()[1]).collect();
                parts.iter().copied().zip(kernels::split_channels(g, &channels)).collect()
            }
            Op::Stack { parts } => parts
                .iter()
                .enumerate()
                .map(|(i, p)| Ok((*p, g.slice_outer(i)?.reshape(self.value(*p).shape().to_vec())?)))
                .collect::<Result<Vec<_>>>()?,
            Op::Gather { x, indices } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (&i, gv) in indices.iter().zip(g.data()) {
                    d[i] += gv;
                }
                vec![(*x, Tensor::from_parts_unchecked(self.value(*x).shape().to_vec(), d))]
            }
            Op::Blur { x, weights } => vec![(*x, kernels::gaussian_blur2d_backward(g, weights)?)],
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = rule.backward(&values, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::shape(format!(
                        "{}: backward returned {} gradients for {} inputs",
                        rule.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .copied()
                    .zip(grads)
                    .filter_map(|(v, g)| g.map(|g| (v, g)))
                    .collect()
            }
        };
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![-3.0, 0.0, 3.0]).unwrap()).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[1], 0.5);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x + 2x, dy/dx = 4
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5)).unwrap();
        let a = tape.add(x, x).unwrap();
        let b = tape.scale(x, 2.0).unwrap();
        let y = tape.add(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()).unwrap();
        let y = tape.relu(x).unwrap();
        let g = tape.backward_with(y, Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(2.0)).unwrap();
        let w = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.add(x, w).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0]);
    }

    #[test]
    fn gather_bounds_and_scatter() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert!(matches!(tape.gather(x, vec![3], &[1]), Err(Error::Index { index: 3, len: 3 })));
        let y = tape.gather(x, vec![2, 2, 0], &[3]).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 3.0, 1.0]);
        let seed = Tensor::new(vec![3], vec![0.5, 0.25, 1.0]).unwrap();
        let g = tape.backward_with(y, seed.clone()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.75]);
        // scatter-add conserves gradient mass
        assert_eq!(g.get(x).unwrap().sum(), seed.sum());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(f64::MAX)).unwrap();
        assert!(matches!(tape.add(x, x), Err(Error::Numeric { .. })));
        assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
    }
}
