use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Result, TensorError};
use crate::profile::record_macs;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine map over the last axis: `y = x W^T + b` with `W: [Dout, Din]`.
pub fn linear<T: Scalar>(x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
    const OP: &str = "linear";
    let din = *x.shape().last().unwrap();
    let [dout, wdin] = w.shape()[..] else {
        return Err(TensorError::dim(OP, "weight rank", format!("expected [Dout,Din], got {:?}", w.shape())));
    };
    if wdin != din {
        return Err(TensorError::dim(OP, "last axis", format!("input has {din} features, weight expects {wdin}")));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(TensorError::dim(OP, "bias", format!("expected [{dout}], got {:?}", b.shape())));
        }
    }
    let rows = x.value().numel() / din;
    record_macs(rows * din * dout);
    let mut out = vec![T::zero(); rows * dout];
    if let Some(b) = bias {
        for r in 0..rows {
            out[r * dout..(r + 1) * dout].copy_from_slice(b.value().data());
        }
    }
    T::gemm(
        rows,
        din,
        dout,
        T::one(),
        x.value().data(),
        (din as isize, 1),
        w.value().data(),
        (1, din as isize),
        if bias.is_some() { T::one() } else { T::zero() },
        &mut out,
        (dout as isize, 1),
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    let mut parents = vec![x, w];
    parents.extend(bias);
    Ok(Var::from_op(
        Tensor::from_parts(shape, out),
        &parents,
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let (x, w, dy) = (args.inputs[0], args.inputs[1], args.grad.data());
            let dx = args.needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * din];
                T::gemm(rows, dout, din, T::one(), dy, (dout as isize, 1), w.data(), (din as isize, 1), T::zero(), &mut dx, (din as isize, 1));
                Tensor::from_parts(x.shape().to_vec(), dx)
            });
            let dw = args.needs[1].then(|| {
                let mut dw = vec![T::zero(); dout * din];
                T::gemm(dout, rows, din, T::one(), dy, (1, dout as isize), x.data(), (din as isize, 1), T::zero(), &mut dw, (din as isize, 1));
                Tensor::from_parts(vec![dout, din], dw)
            });
            let mut grads = vec![dx, dw];
            if args.inputs.len() == 3 {
                grads.push(args.needs[2].then(|| {
                    let mut db = vec![T::zero(); dout];
                    for r in 0..rows {
                        for (a, &g) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
                            *a = *a + g;
                        }
                    }
                    Tensor::from_parts(vec![dout], db)
                }));
            }
            grads
        }),
    ))
}

/// Batched matrix product over the last two axes: `[.., M, K] x [.., K, N]`, or
/// `[.., M, K] x [.., N, K]^T` when `transpose_b`. Leading axes must match exactly.
pub fn matmul<T: Scalar>(a: &Var<T>, b: &Var<T>, transpose_b: bool) -> Result<Var<T>> {
    const OP: &str = "matmul";
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(TensorError::dim(OP, "batch axes", format!("{sa:?} vs {sb:?}")));
    }
    let r = sa.len();
    let (m, k) = (sa[r - 2], sa[r - 1]);
    let (kb, n) = if transpose_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
    if k != kb {
        return Err(TensorError::dim(OP, "inner axis", format!("{sa:?} x {sb:?} (transpose_b={transpose_b})")));
    }
    let batch: usize = sa[..r - 2].iter().product();
    record_macs(batch * m * k * n);
    let b_strides = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.value().data()[i * m * k..(i + 1) * m * k],
            (k as isize, 1),
            &b.value().data()[i * k * n..(i + 1) * k * n],
            b_strides,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            (n as isize, 1),
        );
    }
    let mut shape = sa.to_vec();
    shape[r - 1] = n;
    Ok(Var::from_op(
        Tensor::from_parts(shape, out),
        &[a, b],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let (av, bv, dy) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let da = args.needs[0].then(|| {
                // dA = dY B^T : (m x n)(n x k)
                let mut da = vec![T::zero(); batch * m * k];
                let bt = if transpose_b { (k as isize, 1) } else { (1, n as isize) };
                for i in 0..batch {
                    T::gemm(m, n, k, T::one(), &dy[i * m * n..][..m * n], (n as isize, 1), &bv[i * k * n..][..k * n], bt, T::zero(), &mut da[i * m * k..][..m * k], (k as isize, 1));
                }
                Tensor::from_parts(args.inputs[0].shape().to_vec(), da)
            });
            let db = args.needs[1].then(|| {
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let (a_i, dy_i, db_i) = (&av[i * m * k..][..m * k], &dy[i * m * n..][..m * n], &mut db[i * k * n..][..k * n]);
                    if transpose_b {
                        // dB (n x k) = dY^T A
                        T::gemm(n, m, k, T::one(), dy_i, (1, n as isize), a_i, (k as isize, 1), T::zero(), db_i, (k as isize, 1));
                    } else {
                        // dB (k x n) = A^T dY
                        T::gemm(k, m, n, T::one(), a_i, (1, k as isize), dy_i, (n as isize, 1), T::zero(), db_i, (n as isize, 1));
                    }
                }
                Tensor::from_parts(args.inputs[1].shape().to_vec(), db)
            });
            vec![da, db]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_fn, GradCheckOptions};
    use crate::ops::{mul, sum};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn seq(shape: &[usize], k: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| (i as f64 * k).sin() * 1.3)
    }

    #[test]
    fn identity_weight_is_identity() {
        let x = Var::constant(seq(&[2, 3], 0.7));
        let eye = Var::constant(Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero = Var::constant(Tensor::zeros([3]));
        assert_eq!(linear(&x, &eye, Some(&zero)).unwrap().value(), x.value());
    }

    #[test]
    fn hand_dot_product() {
        let x = Var::constant(t(&[2], &[2.0, 3.0]));
        let w = Var::constant(t(&[1, 2], &[1.0, 1.0]));
        let b = Var::constant(t(&[1], &[1.0]));
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().value().data(), &[6.0]);
    }

    #[test]
    fn mismatched_features_are_rejected() {
        let x = Var::constant(Tensor::<f32>::zeros([2, 3]));
        let w = Var::constant(Tensor::zeros([4, 2]));
        assert!(matches!(linear(&x, &w, None), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn matmul_matches_manual_product() {
        let a = Var::constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = Var::constant(t(&[1, 2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(matmul(&a, &b, false).unwrap().value().data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&a, &b, true).unwrap().value().data(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let opts = GradCheckOptions::default();
        let probe = Var::constant(seq(&[2, 3, 4], 0.31));
        let r = check_fn(
            &[("x", seq(&[2, 3, 5], 0.9)), ("w", seq(&[4, 5], 1.7)), ("b", seq(&[4], 2.3))],
            |v| Ok(sum(&mul(&linear(&v[0], &v[1], Some(&v[2]))?, &probe)?)),
            &opts,
        )
        .unwrap();
        assert!(r.passed(1e-4), "{r:?}");
        for tb in [false, true] {
            let bs = if tb { [2, 3, 4, 5] } else { [2, 3, 5, 4] };
            let probe = Var::constant(seq(&[2, 3, 6, 4], 0.43));
            let r = check_fn(
                &[("a", seq(&[2, 3, 6, 5], 0.5)), ("b", seq(&bs, 1.1))],
                |v| Ok(sum(&mul(&matmul(&v[0], &v[1], tb)?, &probe)?)),
                &opts,
            )
            .unwrap();
            assert!(r.passed(1e-4), "transpose_b={tb}: {r:?}");
        }
    }
}
