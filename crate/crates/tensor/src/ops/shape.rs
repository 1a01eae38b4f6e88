use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{check_shape, strides, Tensor};

pub fn reshape<T: Scalar>(x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    check_shape("reshape", shape)?;
    if shape.iter().product::<usize>() != x.value().numel() {
        return Err(TensorError::dim("reshape", "numel", format!("{:?} -> {shape:?}", x.shape())));
    }
    let orig = x.shape().to_vec();
    Ok(Var::from_op(
        Tensor::from_parts(shape.to_vec(), x.value().data().to_vec()),
        &[x],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            vec![Some(Tensor::from_parts(orig.clone(), args.grad.data().to_vec()))]
        }),
    ))
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let src = x.shape();
    let src_strides = strides(src);
    let out_shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let moved: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; perm.len()];
    let mut off = 0usize;
    let data = x.data();
    for _ in 0..x.numel() {
        out.push(data[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            off += moved[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= moved[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
    let r = x.shape().len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::dim("permute", "permutation", format!("{perm:?} for rank {r}")));
    }
    let mut inverse = vec![0; r];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    Ok(Var::from_op(
        permute_tensor(x.value(), perm),
        &[x],
        Box::new(move |args: &BackwardArgs<'_, T>| vec![Some(permute_tensor(args.grad, &inverse))]),
    ))
}

/// Joins tensors along `axis`; all other axes must agree.
pub fn concat<T: Scalar>(xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    const OP: &str = "concat";
    let first = xs.first().ok_or_else(|| TensorError::config(OP, "no inputs"))?.shape();
    if axis >= first.len() {
        return Err(TensorError::dim(OP, "axis", format!("axis {axis} for rank {}", first.len())));
    }
    for x in xs {
        let s = x.shape();
        if s.len() != first.len() || s.iter().zip(first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(TensorError::dim(OP, format!("axis other than {axis}"), format!("{first:?} vs {s:?}")));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let widths: Vec<usize> = xs.iter().map(|x| x.shape()[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (x, &w) in xs.iter().zip(&widths) {
            out.extend_from_slice(&x.value().data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total / inner;
    let in_shapes: Vec<Vec<usize>> = xs.iter().map(|x| x.shape().to_vec()).collect();
    Ok(Var::from_op(
        Tensor::from_parts(shape, out),
        xs,
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let g = args.grad.data();
            let mut start = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (i, &w) in widths.iter().enumerate() {
                grads.push(args.needs[i].then(|| {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + start..o * total + start + w]);
                    }
                    Tensor::from_parts(in_shapes[i].clone(), d)
                }));
                start += w;
            }
            grads
        }),
    ))
}
