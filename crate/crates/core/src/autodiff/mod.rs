//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Each record
//! carries the operation's inputs and enough context to evaluate its adjoint,
//! so [`Tape::backward`] is a single reverse sweep over the record list. The
//! tape is rebuilt on every forward pass; stochastic layers are free to change
//! the graph between passes.
//!
//! ```
//! use hdpl::autodiff::Tape;
//! use hdpl::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Tapes use interior mutability and are confined to one thread. Separate
//! tapes over the same read-only parameters may run in parallel.

mod backward;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{MatmulPlan, Scalar, Tensor};

pub use backward::Gradients;

/// Operation kinds, used to name adjoints (for example when injecting
/// faults into the gradient check harness).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    Shift,
    Exp,
    Expm1,
    Rsqrt,
    Silu,
    ClampMax,
    Sum,
    SumAxis,
    Softmax,
    Matmul,
    Linear,
    Reshape,
    Permute,
    Slice,
    Concat,
    Embedding,
    CrossEntropy,
    RotatePairs,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    /// Case-insensitive variant name, e.g. `"expm1"` or `"ClampMax"`.
    fn from_str(s: &str) -> Result<Self> {
        use OpKind::*;
        const ALL: [OpKind; 24] = [
            Leaf, Add, Sub, Mul, Neg, Scale, Shift, Exp, Expm1, Rsqrt, Silu, ClampMax, Sum, SumAxis, Softmax, Matmul,
            Linear, Reshape, Permute, Slice, Concat, Embedding, CrossEntropy, RotatePairs,
        ];
        ALL.into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown op kind {s:?}")))
    }
}

#[derive(Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Shift(usize),
    Exp(usize),
    Expm1(usize),
    Rsqrt(usize),
    Silu(usize),
    ClampMax(usize, T),
    Sum(usize),
    SumAxis { input: usize, axis: usize },
    Softmax { input: usize, axis: usize },
    Matmul { a: usize, b: usize, plan: Rc<MatmulPlan> },
    Linear { x: usize, w: usize },
    Reshape(usize),
    Permute { input: usize, perm: Vec<usize> },
    Slice { input: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Embedding { table: usize, indices: Rc<[usize]> },
    CrossEntropy { logits: usize, targets: Rc<[usize]> },
    RotatePairs { input: usize, cos: Rc<[T]>, sin: Rc<[T]> },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Neg(_) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::Shift(_) => OpKind::Shift,
            Op::Exp(_) => OpKind::Exp,
            Op::Expm1(_) => OpKind::Expm1,
            Op::Rsqrt(_) => OpKind::Rsqrt,
            Op::Silu(_) => OpKind::Silu,
            Op::ClampMax(..) => OpKind::ClampMax,
            Op::Sum(_) => OpKind::Sum,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::RotatePairs { .. } => OpKind::RotatePairs,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w } => vec![*x, *w],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Exp(a)
            | Op::Expm1(a)
            | Op::Rsqrt(a)
            | Op::Silu(a)
            | Op::ClampMax(a, _)
            | Op::Sum(a)
            | Op::Reshape(a) => vec![*a],
            Op::SumAxis { input, .. }
            | Op::Softmax { input, .. }
            | Op::Permute { input, .. }
            | Op::Slice { input, .. }
            | Op::RotatePairs { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Record of operations for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    faults: RefCell<Vec<(OpKind, T)>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            faults: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Scales the adjoint of every `kind` node by `factor` during backward.
    /// Exists so gradient checks can be shown to catch a broken rule.
    pub fn inject_adjoint_fault(&self, kind: OpKind, factor: f64) {
        self.faults.borrow_mut().push((kind, T::of(factor)));
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records `op`, marking the result differentiable if any input is.
    fn record(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, rg)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of tensors consumed by
    /// several operations are summed.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let faults = self.faults.borrow();
        Ok(backward::sweep(&nodes, loss.id, &faults))
    }
}

/// Handle to a recorded value. Cheap to copy; valid for the tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}
