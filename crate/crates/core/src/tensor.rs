//! Dense row-major n-dimensional arrays and the numeric kernels behind them.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floating point element type. Models run in `f32`; gradient checks rerun
/// the identical graph in `f64`.
pub trait Scalar:
    Float + FromPrimitive + Sum + Default + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Dtype name used in reports.
    const NAME: &'static str;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..self.data.len().min(PREVIEW)])
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(shape.to_vec()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index of `in_shape` it reads
/// under broadcasting. `None` when the shapes are identical.
pub(crate) fn broadcast_index(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape == out_shape {
        return None;
    }
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    // stride of each output axis into the input, zero where broadcast
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            if i < offset || in_shape[i - offset] == 1 {
                0
            } else {
                in_strides[i - offset]
            }
        })
        .collect();
    let total = numel(out_shape);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        idx.push(pos);
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
    Some(idx)
}

/// Sums a gradient laid out over `out_shape` back onto `in_shape`.
pub(crate) fn reduce_broadcast<T: Scalar>(grad: &[T], in_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    match broadcast_index(in_shape, out_shape) {
        None => grad.to_vec(),
        Some(idx) => {
            let mut acc = vec![T::zero(); numel(in_shape)];
            for (g, &i) in grad.iter().zip(&idx) {
                acc[i] = acc[i] + *g;
            }
            acc
        }
    }
}

const PAR_THRESHOLD: usize = 1 << 15;

/// `c[m,q] (+)= a[m,p] · b[p,q]`, row-major. Each output element accumulates
/// over `p` in index order, so results do not depend on thread count.
pub(crate) fn gemm<T: Scalar>(m: usize, p: usize, q: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(c.len(), m * q);
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * q..(k + 1) * q];
            for (cj, &bkj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aik * bkj;
            }
        }
    };
    if m * p * q >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(q).enumerate().for_each(row);
    } else {
        c.chunks_mut(q).enumerate().for_each(row);
    }
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub(crate) fn transpose2<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Dense product of the trailing two dims, broadcasting leading batch dims.
pub fn matmul_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = MatmulPlan::new(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); numel(&plan.out_shape)];
    plan.forward(a.data(), b.data(), &mut out);
    Tensor::new(&plan.out_shape, out)
}

#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub out_shape: Vec<usize>,
    /// (a batch index, b batch index) for each output batch
    pub pairs: Vec<(usize, usize)>,
    pub a_batches: usize,
    pub b_batches: usize,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, p) = (a[a.len() - 2], a[a.len() - 1]);
        let (p2, q) = (b[b.len() - 2], b[b.len() - 1]);
        if p != p2 {
            return Err(mismatch());
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shape("matmul", ab, bb).map_err(|_| mismatch())?;
        let nb = numel(&batch);
        let ai = broadcast_index(ab, &batch).unwrap_or_else(|| (0..nb).collect());
        let bi = broadcast_index(bb, &batch).unwrap_or_else(|| (0..nb).collect());
        let mut out_shape = batch;
        out_shape.extend([m, q]);
        Ok(Self {
            m,
            p,
            q,
            out_shape,
            pairs: ai.into_iter().zip(bi).collect(),
            a_batches: numel(ab),
            b_batches: numel(bb),
        })
    }

    pub fn forward<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, p, q) = (self.m, self.p, self.q);
        for (ob, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm(
                m,
                p,
                q,
                &a[ia * m * p..(ia + 1) * m * p],
                &b[ib * p * q..(ib + 1) * p * q],
                &mut out[ob * m * q..(ob + 1) * m * q],
            );
        }
    }

    /// Adjoints of both operands given the output gradient.
    pub fn backward<T: Scalar>(&self, a: &[T], b: &[T], g: &[T], want_a: bool, want_b: bool) -> (Vec<T>, Vec<T>) {
        let (m, p, q) = (self.m, self.p, self.q);
        let mut ga = if want_a { vec![T::zero(); self.a_batches * m * p] } else { vec![] };
        let mut gb = if want_b { vec![T::zero(); self.b_batches * p * q] } else { vec![] };
        for (ob, &(ia, ib)) in self.pairs.iter().enumerate() {
            let gy = &g[ob * m * q..(ob + 1) * m * q];
            if want_a {
                // dA = dY · Bᵀ
                let bt = transpose2(p, q, &b[ib * p * q..(ib + 1) * p * q]);
                gemm(m, q, p, gy, &bt, &mut ga[ia * m * p..(ia + 1) * m * p]);
            }
            if want_b {
                // dB = Aᵀ · dY
                let at = transpose2(m, p, &a[ia * m * p..(ia + 1) * m * p]);
                gemm(p, m, q, &at, gy, &mut gb[ib * p * q..(ib + 1) * p * q]);
            }
        }
        (ga, gb)
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_zero_dims() {
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(Error::DataLength { .. })
        ));
        assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 1], &[1, 4]).unwrap(), vec![2, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
        let idx = broadcast_index(&[2, 1], &[2, 3]).unwrap();
        assert_eq!(idx, vec![0, 0, 0, 1, 1, 1]);
        let idx = broadcast_index(&[3], &[2, 3]).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn matmul_identity_and_dot() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let eye = Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        assert_eq!(matmul_values(&a, &eye).unwrap().data(), a.data());
        let r = Tensor::<f64>::from_f64(&[1, 2], &[1., 2.]).unwrap();
        let c = Tensor::from_f64(&[2, 1], &[3., 4.]).unwrap();
        assert_eq!(matmul_values(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = matmul_values(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_batch_dims() {
        let a = Tensor::<f64>::from_f64(&[2, 1, 2], &[1., 2., 3., 4.]).unwrap();
        let b = Tensor::from_f64(&[2, 1], &[1., 1.]).unwrap();
        let c = matmul_values(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3., 7.]);
    }
}
