use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation: receives the gradient
/// flowing into the node's output and accumulates into its inputs.
pub type BackwardFn = Box<dyn Fn(&[f64], &Values<'_>, &mut GradSink<'_>)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Dynamically built reverse-mode graph.
///
/// A tape is built fresh for every forward pass; parameters enter as leaves
/// via [`Tape::leaf`] and leave through [`Gradients`]. Constants never
/// receive gradient.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Read access to recorded values during the backward sweep.
pub struct Values<'a> {
    nodes: &'a [Node],
}

impl<'a> Values<'a> {
    pub fn get(&self, v: Var) -> &'a [f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &'a [usize] {
        self.nodes[v.0].value.shape()
    }
}

/// Write access to input gradients during the backward sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl GradSink<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v`, zero-initialised on first use; `None` when
    /// `v` does not require gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(dst) = self.slot(v) {
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }
}

/// Gradients produced by a backward sweep, indexed by [`Var`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn accumulate(&mut self, other: Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.iter_mut().zip(&s).for_each(|(a, b)| *a += b),
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
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

    fn push(&mut self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node { value, requires_grad, backward });
        v
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Registers every tensor as a leaf (or constant) in order.
    pub fn bind(&mut self, params: &[&Tensor], requires_grad: bool) -> Vec<Var> {
        params
            .iter()
            .map(|t| self.push((*t).clone(), requires_grad, None))
            .collect()
    }

    /// Copy of `v` cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn next_var(&self) -> Var {
        Var(self.nodes.len())
    }

    /// Records an operation with a hand-written vector-Jacobian product.
    ///
    /// The backward closure is dropped when none of `inputs` requires
    /// gradient, so forward-only passes cost no graph memory.
    pub fn custom(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = if requires_grad { Some(backward) } else { None };
        self.push(value, requires_grad, backward)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let values = Values { nodes: &self.nodes };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bwd) = &self.nodes[i].backward {
                let mut sink = GradSink { grads: &mut grads[..i], nodes: &self.nodes };
                bwd(&g, &values, &mut sink);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Like [`Tape::backward`] but adds into an existing gradient set.
    pub fn backward_accumulate(&self, loss: Var, into: &mut Gradients) -> Result<()> {
        let fresh = self.backward(loss)?;
        into.accumulate(fresh);
        Ok(())
    }

    /// Gradient of each var as a tensor of the var's shape (zeros when the
    /// var was unreachable).
    pub fn grad_tensors(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|&v| {
                let shape = self.shape(v);
                match grads.wrt(v) {
                    Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }
}
