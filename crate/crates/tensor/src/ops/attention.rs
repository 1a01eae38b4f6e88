use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Result, TensorError};
use crate::ops::conv::{conv2d, Conv2dOptions};
use crate::ops::elementwise::{mul, relu, scale, sigmoid};
use crate::ops::linear::{linear, matmul};
use crate::ops::pool::global_avg_pool;
use crate::ops::shape::{permute, reshape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numerically stable softmax over the last axis.
pub fn softmax<T: Scalar>(x: &Var<T>) -> Var<T> {
    let d = *x.shape().last().unwrap();
    let mut out = x.value().data().to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Var::from_op(
        Tensor::from_parts(x.shape().to_vec(), out),
        &[x],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let mut dx = Vec::with_capacity(args.grad.numel());
            for (y, g) in args.output.data().chunks(d).zip(args.grad.data().chunks(d)) {
                let dot = y.iter().zip(g).fold(T::zero(), |a, (&y, &g)| a + y * g);
                dx.extend(y.iter().zip(g).map(|(&y, &g)| y * (g - dot)));
            }
            vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), dx))]
        }),
    )
}

/// Projection weights of one attention layer, each `[D, D]`, applied without biases.
pub struct AttentionWeights<'a, T> {
    pub wq: &'a Var<T>,
    pub wk: &'a Var<T>,
    pub wv: &'a Var<T>,
    pub wo: &'a Var<T>,
}

/// Scaled dot-product multi-head self-attention over `[B, L, D]`.
///
/// Returns the projected output `[B, L, D]` and the attention weights `[B, heads, L, L]`.
pub fn multi_head_attention<T: Scalar>(
    x: &Var<T>,
    w: &AttentionWeights<'_, T>,
    heads: usize,
) -> Result<(Var<T>, Var<T>)> {
    let [b, l, d] = x.shape()[..] else {
        return Err(TensorError::dim("multi_head_attention", "input rank", format!("expected [B,L,D], got {:?}", x.shape())));
    };
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::config("multi_head_attention", format!("embed dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |v: Var<T>| -> Result<Var<T>> { permute(&reshape(&v, &[b, l, heads, dh])?, &[0, 2, 1, 3]) };
    let q = split(linear(x, w.wq, None)?)?;
    let k = split(linear(x, w.wk, None)?)?;
    let v = split(linear(x, w.wv, None)?)?;
    let scores = scale(&matmul(&q, &k, true)?, 1.0 / (dh as f64).sqrt());
    let attn = softmax(&scores);
    let ctx = matmul(&attn, &v, false)?;
    let ctx = reshape(&permute(&ctx, &[0, 2, 1, 3])?, &[b, l, d])?;
    Ok((linear(&ctx, w.wo, None)?, attn))
}

/// Squeeze-and-excitation gate: `x * sigmoid(W2 relu(W1 gap(x)))` with bias-free 1x1
/// convolutions `w1: [R, C, 1, 1]`, `w2: [C, R, 1, 1]`.
pub fn se_gate<T: Scalar>(x: &Var<T>, w1: &Var<T>, w2: &Var<T>) -> Result<Var<T>> {
    let s = global_avg_pool(x)?;
    let s = relu(&conv2d(&s, w1, None, Conv2dOptions::default())?);
    let s = sigmoid(&conv2d(&s, w2, None, Conv2dOptions::default())?);
    mul(x, &s)
}
