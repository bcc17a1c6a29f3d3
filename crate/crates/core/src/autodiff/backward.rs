use super::ops::{permute_data, sigmoid};
use super::{Node, Op, OpKind, Var};
use crate::tensor::{axis_extents, broadcast_index, gemm, reduce_broadcast, transpose2, Scalar, Tensor};

/// Gradients of a scalar loss with respect to every differentiable leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf var; `None` if the var is not a differentiable
    /// leaf or the loss does not depend on it.
    pub fn get(&self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        self.get_id(var.id())
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<Tensor<T>> {
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::new(&self.shapes[id], g.clone()).expect("gradient matches value shape"))
    }

    /// Like [`Gradients::get`], but zeros when the loss does not reach the var.
    pub fn get_or_zeros(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a = *a + x;
            }
        }
        None => *slot = Some(g),
    }
}

/// Broadcasts `src` (shape `in_shape`) to `out_shape` and multiplies by `g`.
fn times_broadcast<T: Scalar>(g: &[T], src: &Tensor<T>, out_shape: &[usize]) -> Vec<T> {
    match broadcast_index(src.shape(), out_shape) {
        None => g.iter().zip(src.data()).map(|(&a, &b)| a * b).collect(),
        Some(idx) => g.iter().zip(&idx).map(|(&a, &i)| a * src.data()[i]).collect(),
    }
}

pub(super) fn sweep<T: Scalar>(nodes: &[Node<T>], root: usize, faults: &[(OpKind, T)]) -> Gradients<T> {
    let mut pending: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
    let mut leaves: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
    pending[root] = Some(vec![T::one()]);

    for id in (0..=root).rev() {
        let Some(g) = pending[id].take() else { continue };
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        if let Op::Leaf = node.op {
            leaves[id] = Some(g);
            continue;
        }
        let mut contributions = local_adjoints(nodes, node, &g);
        let kind = node.op.kind();
        for &(k, factor) in faults {
            if k == kind {
                for (_, c) in contributions.iter_mut() {
                    c.iter_mut().for_each(|x| *x = *x * factor);
                }
            }
        }
        for (input, c) in contributions {
            if nodes[input].requires_grad {
                accumulate(&mut pending[input], c);
            }
        }
    }

    Gradients {
        grads: leaves,
        shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
    }
}

/// Adjoint of one node: the gradient it sends to each of its inputs.
fn local_adjoints<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let val = |i: usize| &*nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_broadcast(g, val(*a).shape(), out_shape)),
            (*b, reduce_broadcast(g, val(*b).shape(), out_shape)),
        ],
        Op::Sub(a, b) => {
            let neg: Vec<T> = g.iter().map(|&x| -x).collect();
            vec![
                (*a, reduce_broadcast(g, val(*a).shape(), out_shape)),
                (*b, reduce_broadcast(&neg, val(*b).shape(), out_shape)),
            ]
        }
        Op::Mul(a, b) => {
            let mut out = Vec::new();
            if wants(*a) {
                let gb = times_broadcast(g, val(*b), out_shape);
                out.push((*a, reduce_broadcast(&gb, val(*a).shape(), out_shape)));
            }
            if wants(*b) {
                let ga = times_broadcast(g, val(*a), out_shape);
                out.push((*b, reduce_broadcast(&ga, val(*b).shape(), out_shape)));
            }
            out
        }
        Op::Neg(a) => vec![(*a, g.iter().map(|&x| -x).collect())],
        Op::Scale(a, c) => vec![(*a, g.iter().map(|&x| x * *c).collect())],
        Op::Shift(a) => vec![(*a, g.to_vec())],
        Op::Exp(a) => {
            let y = node.value.data();
            vec![(*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect())]
        }
        Op::Expm1(a) => {
            let y = node.value.data();
            vec![(*a, g.iter().zip(y).map(|(&g, &y)| g * (y + T::one())).collect())]
        }
        Op::Rsqrt(a) => {
            let y = node.value.data();
            let half = T::of(-0.5);
            vec![(*a, g.iter().zip(y).map(|(&g, &y)| g * half * y * y * y).collect())]
        }
        Op::Silu(a) => {
            let x = val(*a).data();
            let gin = g
                .iter()
                .zip(x)
                .map(|(&g, &x)| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                })
                .collect();
            vec![(*a, gin)]
        }
        Op::ClampMax(a, cap) => {
            let x = val(*a).data();
            let gin = g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x < *cap { g } else { T::zero() })
                .collect();
            vec![(*a, gin)]
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::SumAxis { input, axis } => {
            let shape = val(*input).shape();
            let (outer, n, inner) = axis_extents(shape, *axis);
            let mut gin = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    gin[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![(*input, gin)]
        }
        Op::Softmax { input, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = axis_extents(out_shape, *axis);
            let mut gin = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot = (0..n).fold(T::zero(), |acc, k| acc + y[at(k)] * g[at(k)]);
                    for k in 0..n {
                        gin[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![(*input, gin)]
        }
        Op::Matmul { a, b, plan } => {
            let (ga, gb) = plan.backward(val(*a).data(), val(*b).data(), g, wants(*a), wants(*b));
            let mut out = Vec::new();
            if wants(*a) {
                out.push((*a, ga));
            }
            if wants(*b) {
                out.push((*b, gb));
            }
            out
        }
        Op::Linear { x, w } => {
            let (xv, wv) = (val(*x), val(*w));
            let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.numel() / d_in;
            let mut out = Vec::new();
            if wants(*x) {
                // dx = dy · w
                let mut gx = vec![T::zero(); rows * d_in];
                gemm(rows, d_out, d_in, g, wv.data(), &mut gx);
                out.push((*x, gx));
            }
            if wants(*w) {
                // dw = dyᵀ · x
                let gt = transpose2(rows, d_out, g);
                let mut gw = vec![T::zero(); d_out * d_in];
                gemm(d_out, rows, d_in, &gt, xv.data(), &mut gw);
                out.push((*w, gw));
            }
            out
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Permute { input, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (gin, _) = permute_data(g, out_shape, &inv);
            vec![(*input, gin)]
        }
        Op::Slice { input, axis, start } => {
            let in_shape = val(*input).shape();
            let (outer, n, inner) = axis_extents(in_shape, *axis);
            let len = out_shape[*axis];
            let mut gin = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                gin[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*input, gin)]
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_extents(out_shape, *axis);
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for &inp in inputs {
                let n = val(inp).shape()[*axis];
                let mut gin = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    gin.extend_from_slice(&g[src..src + n * inner]);
                }
                offset += n;
                out.push((inp, gin));
            }
            out
        }
        Op::Embedding { table, indices } => {
            let tv = val(*table);
            let dim = tv.shape()[1];
            let mut gt = vec![T::zero(); tv.numel()];
            for (row, &i) in indices.iter().enumerate() {
                for d in 0..dim {
                    gt[i * dim + d] = gt[i * dim + d] + g[row * dim + d];
                }
            }
            vec![(*table, gt)]
        }
        Op::CrossEntropy { logits, targets } => {
            let lv = val(*logits);
            let vocab = lv.shape()[1];
            let scale = g[0] / T::of(targets.len() as f64);
            let mut gin = vec![T::zero(); lv.numel()];
            for ((row, dst), &t) in lv.data().chunks(vocab).zip(gin.chunks_mut(vocab)).zip(targets.iter()) {
                let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut total = T::zero();
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d = (x - max).exp();
                    total = total + *d;
                }
                for d in dst.iter_mut() {
                    *d = *d / total * scale;
                }
                dst[t] = dst[t] - scale;
            }
            vec![(*logits, gin)]
        }
        Op::RotatePairs { input, cos, sin } => {
            let width = out_shape[out_shape.len() - 1];
            let positions = out_shape[out_shape.len() - 2];
            let half = width / 2;
            let mut gin = vec![T::zero(); g.len()];
            for (row, (src, dst)) in g.chunks(width).zip(gin.chunks_mut(width)).enumerate() {
                let p = row % positions;
                for i in 0..half {
                    let (c, s) = (cos[p * half + i], sin[p * half + i]);
                    let (g0, g1) = (src[2 * i], src[2 * i + 1]);
                    dst[2 * i] = g0 * c + g1 * s;
                    dst[2 * i + 1] = g1 * c - g0 * s;
                }
            }
            vec![(*input, gin)]
        }
    }
}
