use std::rc::Rc;

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{
    axis_extents, broadcast_index, broadcast_shape, gemm, numel, strides, transpose2, MatmulPlan,
    Scalar, Tensor,
};

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Axis { axis, rank })
    } else {
        Ok(())
    }
}

pub(crate) fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        out.push(data[pos]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            pos += eff[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            pos -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes cannot be combined"
        );
    }

    fn zip_with(&self, other: &Var<'t, T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
        let ia = broadcast_index(a.shape(), &out_shape);
        let ib = broadcast_index(b.shape(), &out_shape);
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<T> = match (ia, ib) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            (None, Some(ib)) => ad.iter().zip(&ib).map(|(&x, &j)| f(x, bd[j])).collect(),
            (Some(ia), None) => ia.iter().zip(bd).map(|(&i, &y)| f(ad[i], y)).collect(),
            (Some(ia), Some(ib)) => ia.iter().zip(&ib).map(|(&i, &j)| f(ad[i], bd[j])).collect(),
        };
        Tensor::new(&out_shape, data)
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let out = self.value().map(f);
        self.tape.record(out, op)
    }

    /// Elementwise sum with trailing-aligned broadcasting.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.tape.record(out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.tape.record(out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.tape.record(out, Op::Mul(self.id, other.id)))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    /// Addition of a constant.
    pub fn shift(&self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.unary(Op::Shift(self.id), |x| x + c)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    /// `eˣ − 1`, accurate near zero.
    pub fn expm1(&self) -> Var<'t, T> {
        self.unary(Op::Expm1(self.id), |x| x.exp_m1())
    }

    /// `1/√x`
    pub fn rsqrt(&self) -> Var<'t, T> {
        self.unary(Op::Rsqrt(self.id), |x| x.sqrt().recip())
    }

    /// `x·sigmoid(x)`
    pub fn silu(&self) -> Var<'t, T> {
        self.unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    /// `min(x, cap)`; the subgradient at `x == cap` is zero.
    pub fn clamp_max(&self, cap: f64) -> Var<'t, T> {
        let cap = T::of(cap);
        self.unary(Op::ClampMax(self.id, cap), |x| if x < cap { x } else { cap })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t, T> {
        let v = self.value();
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        check_axis(axis, v.rank())?;
        let (outer, n, inner) = axis_extents(v.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = v.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[base + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(&shape, out)?;
        Ok(self.tape.record(t, Op::SumAxis { input: self.id, axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Max-subtracted exponential normalisation along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        check_axis(axis, v.rank())?;
        let (outer, n, inner) = axis_extents(v.shape(), axis);
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..n {
                    max = max.max(d[at(k)]);
                }
                let mut total = T::zero();
                for k in 0..n {
                    let e = (d[at(k)] - max).exp();
                    out[at(k)] = e;
                    total = total + e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        Ok(self.tape.record(t, Op::Softmax { input: self.id, axis }))
    }

    /// Product over the trailing two dims; leading dims broadcast.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let plan = MatmulPlan::new(a.shape(), b.shape())?;
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        plan.forward(a.data(), b.data(), &mut out);
        let t = Tensor::new(&plan.out_shape, out)?;
        Ok(self.tape.record(
            t,
            Op::Matmul {
                a: self.id,
                b: other.id,
                plan: Rc::new(plan),
            },
        ))
    }

    /// `x · wᵀ` for `w` of shape `[out, in]`, applied over the last axis.
    pub fn linear(&self, w: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(w);
        let (x, wv) = (self.value(), w.value());
        let mismatch = || Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        };
        if wv.rank() != 2 || x.rank() == 0 {
            return Err(mismatch());
        }
        let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
        if *x.shape().last().unwrap() != d_in {
            return Err(mismatch());
        }
        let rows = x.numel() / d_in;
        let wt = transpose2(d_out, d_in, wv.data());
        let mut out = vec![T::zero(); rows * d_out];
        gemm(rows, d_in, d_out, x.data(), &wt, &mut out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let t = Tensor::new(&shape, out)?;
        Ok(self.tape.record(t, Op::Linear { x: self.id, w: w.id }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let t = (*self.value()).clone().reshaped(shape)?;
        Ok(self.tape.record(t, Op::Reshape(self.id)))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let mut seen = vec![false; v.rank()];
        let valid = perm.len() == v.rank()
            && perm.iter().all(|&p| p < v.rank() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::ShapeMismatch {
                op: "permute",
                lhs: v.shape().to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let (data, shape) = permute_data(v.data(), v.shape(), perm);
        let t = Tensor::new(&shape, data)?;
        Ok(self.tape.record(
            t,
            Op::Permute {
                input: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::Axis { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        check_axis(axis, v.rank())?;
        let (outer, n, inner) = axis_extents(v.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::IndexOutOfRange {
                what: "slice",
                index: start + len,
                size: n,
            });
        }
        let d = v.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.tape.record(
            t,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Rotates consecutive pairs `(x₂ᵢ, x₂ᵢ₊₁)` of the last axis by per-position
    /// angles. `cos`/`sin` are `[positions, last/2]` tables; the position is the
    /// index along the second-to-last axis.
    pub fn rotate_pairs(&self, cos: Rc<[T]>, sin: Rc<[T]>) -> Result<Var<'t, T>> {
        let v = self.value();
        let shape = v.shape();
        if v.rank() < 2 || shape[v.rank() - 1] % 2 != 0 {
            return Err(Error::InvalidShape(shape.to_vec()));
        }
        let width = shape[v.rank() - 1];
        let positions = shape[v.rank() - 2];
        let half = width / 2;
        if cos.len() != positions * half || sin.len() != positions * half {
            return Err(Error::ShapeMismatch {
                op: "rotate_pairs",
                lhs: shape.to_vec(),
                rhs: vec![cos.len()],
            });
        }
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        for (row, (src, dst)) in d.chunks(width).zip(out.chunks_mut(width)).enumerate() {
            let p = row % positions;
            for i in 0..half {
                let (c, s) = (cos[p * half + i], sin[p * half + i]);
                let (x0, x1) = (src[2 * i], src[2 * i + 1]);
                dst[2 * i] = x0 * c - x1 * s;
                dst[2 * i + 1] = x0 * s + x1 * c;
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.tape.record(
            t,
            Op::RotatePairs {
                input: self.id,
                cos,
                sin,
            },
        ))
    }

    /// Mean token cross-entropy of `[N, V]` logits against `N` class ids.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.rank() != 2 || v.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let vocab = v.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::IndexOutOfRange {
                what: "target vocabulary",
                index: bad,
                size: vocab,
            });
        }
        let mut total = T::zero();
        for (row, &t) in v.data().chunks(vocab).zip(targets) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp()).ln() + max;
            total = total + (lse - row[t]);
        }
        let loss = total / T::of(targets.len() as f64);
        Ok(self.tape.record(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.into(),
            },
        ))
    }
}

impl<T: Scalar> Tape<T> {
    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(Error::InvalidShape(vec![]))?.value();
        check_axis(axis, first.rank())?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &values {
            let mut s = v.shape().to_vec();
            let len = s[axis];
            s[axis] = 0;
            let mut expect = first.shape().to_vec();
            expect[axis] = 0;
            if s != expect {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            shape[axis] += len;
        }
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.record(
            t,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Gathers rows of a `[V, D]` table; output `[indices.len(), D]`.
    pub fn embedding<'t>(&'t self, table: &Var<'t, T>, indices: &[usize]) -> Result<Var<'t, T>> {
        let tv = table.value();
        if tv.rank() != 2 || indices.is_empty() {
            return Err(Error::InvalidShape(tv.shape().to_vec()));
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: i,
                    size: vocab,
                });
            }
            out.extend_from_slice(&tv.data()[i * dim..(i + 1) * dim]);
        }
        let t = Tensor::new(&[indices.len(), dim], out)?;
        Ok(self.record(
            t,
            Op::Embedding {
                table: table.id,
                indices: indices.into(),
            },
        ))
    }
}
