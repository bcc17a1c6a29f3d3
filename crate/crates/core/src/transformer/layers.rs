use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `x / √(mean(x²) + eps) ⊙ gain` over the last axis.
pub fn rmsnorm<'t, T: Scalar>(x: &Var<'t, T>, gain: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let last = shape.len() - 1;
    if gain.shape() != [shape[last]] {
        return Err(Error::ShapeMismatch {
            op: "rmsnorm",
            lhs: shape,
            rhs: gain.shape(),
        });
    }
    let inv_rms = x.mul(x)?.mean_axis(last)?.shift(eps).rsqrt();
    x.mul(&inv_rms)?.mul(gain)
}

/// Cosine and sine tables `[positions, head_dim/2]` for angle
/// `p · base^(−2i/head_dim)`.
pub fn rope_tables<T: Scalar>(positions: usize, head_dim: usize, base: f64) -> Result<(Rc<[T]>, Rc<[T]>)> {
    if head_dim % 2 != 0 || head_dim == 0 {
        return Err(Error::config(format!("rotary embeddings need an even head_dim, got {head_dim}")));
    }
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions * half);
    let mut sin = Vec::with_capacity(positions * half);
    for p in 0..positions {
        for i in 0..half {
            let theta = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            cos.push(T::of(theta.cos()));
            sin.push(T::of(theta.sin()));
        }
    }
    Ok((cos.into(), sin.into()))
}

/// Rotates each consecutive feature pair of `[B, H, L, head_dim]` by its
/// position-dependent angle.
pub fn apply_rope<'t, T: Scalar>(x: &Var<'t, T>, base: f64) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::InvalidShape(shape));
    }
    let (positions, head_dim) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (cos, sin) = rope_tables(positions, head_dim, base)?;
    x.rotate_pairs(cos, sin)
}

/// `[L, L]` additive mask: 0 on and below the diagonal, −∞ above.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = T::neg_infinity();
        }
    }
    Tensor::new(&[len, len], data).expect("square mask")
}

/// `softmax(q·kᵀ/√d + mask)·v` over `[B, H, L, d]` inputs; position `t` only
/// attends to positions `≤ t`.
pub fn causal_attention<'t, T: Scalar>(q: &Var<'t, T>, k: &Var<'t, T>, v: &Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = q.shape();
    if shape.len() < 2 || k.shape() != shape || v.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: shape,
            rhs: k.shape(),
        });
    }
    let (len, dim) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mask = q.tape().constant(causal_mask(len));
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (dim as f64).sqrt()).add(&mask)?;
    let last = shape.len() - 1;
    scores.softmax(last)?.matmul(v)
}
