use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
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
                return Err(TensorError::dim(
                    "broadcast",
                    format!("axis {i}"),
                    format!("{a:?} and {b:?} are not broadcast-compatible"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every output element with the matching flat offsets into `a` and `b`.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    for _ in 0..outer {
        let mut base_a = 0;
        let mut base_b = 0;
        for (d, &i) in idx.iter().enumerate() {
            base_a += i * sa[d];
            base_b += i * sb[d];
        }
        for j in 0..inner {
            f(o, base_a + j * ia, base_b + j * ib);
            o += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn zip_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![T::zero(); n];
    let (da, db) = (a.data(), b.data());
    for_each_pair(&out, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub fn sum_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape();
    let st = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut acc = Tensor::zeros(shape.to_vec());
    let gd = g.data();
    let ad = acc.data_mut();
    for_each_pair(out, &st, &zeros, |o, t, _| ad[t] = ad[t] + gd[o]);
    acc
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let value = zip_broadcast(a.value(), b.value(), |x, y| x + y)?;
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    Ok(Var::from_op(
        value,
        &[a, b],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            vec![
                args.needs[0].then(|| sum_to_shape(args.grad, &sa)),
                args.needs[1].then(|| sum_to_shape(args.grad, &sb)),
            ]
        }),
    ))
}

pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let value = zip_broadcast(a.value(), b.value(), |x, y| x - y)?;
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    Ok(Var::from_op(
        value,
        &[a, b],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            vec![
                args.needs[0].then(|| sum_to_shape(args.grad, &sa)),
                args.needs[1].then(|| sum_to_shape(&args.grad.map(|g| -g), &sb)),
            ]
        }),
    ))
}

pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let value = zip_broadcast(a.value(), b.value(), |x, y| x * y)?;
    Ok(Var::from_op(
        value,
        &[a, b],
        Box::new(|args: &BackwardArgs<'_, T>| {
            let (x, y) = (args.inputs[0], args.inputs[1]);
            let ga = args.needs[0].then(|| {
                let full = zip_broadcast(args.grad, y, |g, v| g * v).expect("broadcast checked");
                sum_to_shape(&full, x.shape())
            });
            let gb = args.needs[1].then(|| {
                let full = zip_broadcast(args.grad, x, |g, v| g * v).expect("broadcast checked");
                sum_to_shape(&full, y.shape())
            });
            vec![ga, gb]
        }),
    ))
}

/// `k * x` for a fixed scalar `k`.
pub fn scale<T: Scalar>(x: &Var<T>, k: f64) -> Var<T> {
    let k = T::from_f64_lossy(k);
    Var::from_op(
        x.value().map(|v| v * k),
        &[x],
        Box::new(move |args: &BackwardArgs<'_, T>| vec![Some(args.grad.map(|g| g * k))]),
    )
}

fn unary<T: Scalar>(
    x: &Var<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<T> {
    Var::from_op(
        x.value().map(f),
        &[x],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let g = args
                .grad
                .data()
                .iter()
                .zip(args.inputs[0].data())
                .zip(args.output.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), g))]
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

pub fn activation<T: Scalar>(x: &Var<T>, kind: Activation) -> Var<T> {
    match kind {
        Activation::Relu => relu(x),
        Activation::Gelu => gelu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

pub fn relu<T: Scalar>(x: &Var<T>) -> Var<T> {
    unary(
        x,
        |v| v.max(T::zero()),
        |x, _| if x > T::zero() { T::one() } else { T::zero() },
    )
}

pub fn sigmoid<T: Scalar>(x: &Var<T>) -> Var<T> {
    unary(x, sigmoid_scalar, |_, y| y * (T::one() - y))
}

pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
pub fn gelu<T: Scalar>(x: &Var<T>) -> Var<T> {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64_lossy(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
    unary(
        x,
        move |v| half * v * (T::one() + (v * inv_sqrt2).erf()),
        move |v, _| {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            let pdf = inv_sqrt_2pi * (-half * v * v).exp();
            cdf + v * pdf
        },
    )
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum<T: Scalar>(x: &Var<T>) -> Var<T> {
    let shape = x.shape().to_vec();
    Var::from_op(
        Tensor::scalar(x.value().sum()),
        &[x],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            vec![Some(Tensor::full(shape.clone(), args.grad.data()[0]))]
        }),
    )
}

pub fn mean<T: Scalar>(x: &Var<T>) -> Var<T> {
    let n = x.value().numel() as f64;
    scale(&sum(x), 1.0 / n)
}
