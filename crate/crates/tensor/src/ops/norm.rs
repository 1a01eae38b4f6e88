use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<T>,
    /// Elements per channel (`N*H*W`).
    pub count: usize,
}

/// Non-learnable part of a batch-norm layer; the affine `gamma`/`beta` are graph values.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Exponential moving update; the variance is stored unbiased.
    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64_lossy(self.momentum);
        let keep = T::one() - m;
        let unbias = T::from_f64_lossy(stats.count as f64 / (stats.count as f64 - 1.0).max(1.0));
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Batch normalization over `[N,C,H,W]`.
///
/// Train mode normalizes with the batch statistics and returns them so the caller can
/// update its running averages; eval mode uses `state`'s running statistics.
pub fn batch_norm2d<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Var<T>, Option<BatchStats<T>>)> {
    const OP: &str = "batch_norm2d";
    let (n, c, h, w) = x.value().dims4(OP)?;
    for (name, t) in [("gamma", gamma.value()), ("beta", beta.value()), ("running_mean", &state.running_mean), ("running_var", &state.running_var)] {
        if t.shape() != [c] {
            return Err(TensorError::dim(OP, "channels", format!("{name} has shape {:?}, input has {c} channels", t.shape())));
        }
    }
    let hw = h * w;
    let count = n * hw;
    let eps = T::from_f64_lossy(state.eps);
    let xd = x.value().data();

    let (mean, inv_std, stats) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(TensorError::dim(OP, "batch", format!("train mode needs N*H*W >= 2, got {count}")));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_count = T::one() / T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s = s + xd[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                }
                let m = s * inv_count;
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in &xd[(b * c + ch) * hw..][..hw] {
                        sq = sq + (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = sq * inv_count;
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean.clone(), inv_std, Some(BatchStats { mean, var, count }))
        }
        Mode::Eval => {
            let inv_std = state.running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (state.running_mean.data().to_vec(), inv_std, None)
        }
    };

    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let (m, s, g, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
            let off = (b * c + ch) * hw;
            for (o, &v) in out[off..off + hw].iter_mut().zip(&xd[off..off + hw]) {
                *o = g * ((v - m) * s) + be;
            }
        }
    }
    let value = Tensor::from_parts(x.shape().to_vec(), out);
    let var = Var::from_op(
        value,
        &[x, gamma, beta],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let xd = args.inputs[0].data();
            let gd = args.inputs[1].data();
            let dy = args.grad.data();
            let mut dx = args.needs[0].then(|| vec![T::zero(); xd.len()]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let m_f = T::from_usize(count).unwrap();
            for ch in 0..c {
                let (m, s) = (mean[ch], inv_std[ch]);
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    for (&g, &v) in dy[off..off + hw].iter().zip(&xd[off..off + hw]) {
                        sum_g = sum_g + g;
                        sum_gx = sum_gx + g * (v - m) * s;
                    }
                }
                dgamma[ch] = sum_gx;
                dbeta[ch] = sum_g;
                if let Some(dx) = dx.as_deref_mut() {
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dx[i] = match mode {
                                Mode::Train => {
                                    let xhat = (xd[i] - m) * s;
                                    gd[ch] * s / m_f * (m_f * dy[i] - sum_g - xhat * sum_gx)
                                }
                                Mode::Eval => dy[i] * gd[ch] * s,
                            };
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_parts(args.inputs[0].shape().to_vec(), d)),
                args.needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                args.needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
            ]
        }),
    );
    Ok((var, stats))
}

/// Layer normalization over the last axis followed by a per-feature affine map.
pub fn layer_norm<T: Scalar>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
    const OP: &str = "layer_norm";
    let d = *x.shape().last().unwrap();
    for (name, t) in [("gamma", gamma.value()), ("beta", beta.value())] {
        if t.shape() != [d] {
            return Err(TensorError::dim(OP, "last axis", format!("{name} has shape {:?}, input last axis is {d}", t.shape())));
        }
    }
    let rows = x.value().numel() / d;
    let eps = T::from_f64_lossy(LN_EPS);
    let d_f = T::from_usize(d).unwrap();
    let xd = x.value().data();
    let mut mean = vec![T::zero(); rows];
    let mut inv_std = vec![T::zero(); rows];
    let mut out = vec![T::zero(); xd.len()];
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let m = row.iter().copied().sum::<T>() / d_f;
        let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / d_f;
        let s = T::one() / (v + eps).sqrt();
        mean[r] = m;
        inv_std[r] = s;
        for j in 0..d {
            out[r * d + j] = gd[j] * ((row[j] - m) * s) + bd[j];
        }
    }
    Ok(Var::from_op(
        Tensor::from_parts(x.shape().to_vec(), out),
        &[x, gamma, beta],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let xd = args.inputs[0].data();
            let gd = args.inputs[1].data();
            let dy = args.grad.data();
            let mut dx = vec![T::zero(); xd.len()];
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            for r in 0..rows {
                let (m, s) = (mean[r], inv_std[r]);
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for j in 0..d {
                    let i = r * d + j;
                    let xhat = (xd[i] - m) * s;
                    let g = dy[i] * gd[j];
                    sum_g = sum_g + g;
                    sum_gx = sum_gx + g * xhat;
                    dgamma[j] = dgamma[j] + dy[i] * xhat;
                    dbeta[j] = dbeta[j] + dy[i];
                }
                for j in 0..d {
                    let i = r * d + j;
                    let xhat = (xd[i] - m) * s;
                    dx[i] = s / d_f * (d_f * dy[i] * gd[j] - sum_g - xhat * sum_gx);
                }
            }
            vec![
                args.needs[0].then(|| Tensor::from_parts(args.inputs[0].shape().to_vec(), dx)),
                args.needs[1].then(|| Tensor::from_parts(vec![d], dgamma)),
                args.needs[2].then(|| Tensor::from_parts(vec![d], dbeta)),
            ]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_fn, GradCheckOptions};
    use crate::ops::{mul, sum};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-2.0..2.0))
    }

    fn c(t: Tensor<f64>) -> Var<f64> {
        Var::constant(t)
    }

    #[test]
    fn eval_with_unit_stats_is_near_identity() {
        let x = rand_tensor(&[2, 3, 4, 4], 1);
        let st = BatchNormState::new(3);
        let (y, stats) = batch_norm2d(&c(x.clone()), &c(Tensor::ones([3])), &c(Tensor::zeros([3])), &st, Mode::Eval).unwrap();
        assert!(stats.is_none());
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn train_constant_input_normalizes_to_zero() {
        let x = Tensor::<f64>::full([2, 2, 3, 3], 7.5);
        let st = BatchNormState::new(2);
        let (y, _) = batch_norm2d(&c(x), &c(Tensor::ones([2])), &c(Tensor::zeros([2])), &st, Mode::Train).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_statistics_match_naive_loops() {
        let x = rand_tensor(&[2, 4, 5, 5], 3);
        let st = BatchNormState::new(4);
        let (y, stats) = batch_norm2d(&c(x.clone()), &c(Tensor::ones([4])), &c(Tensor::zeros([4])), &st, Mode::Train).unwrap();
        let stats = stats.unwrap();
        for ch in 0..4 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..25).map(move |i| (n, i)))
                .map(|(n, i)| x.data()[(n * 4 + ch) * 25 + i])
                .collect();
            let m = vals.iter().sum::<f64>() / 50.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 50.0;
            assert!((stats.mean[ch] - m).abs() < 1e-12);
            assert!((stats.var[ch] - v).abs() < 1e-12);
            let ys: Vec<f64> = (0..2)
                .flat_map(|n| (0..25).map(move |i| (n, i)))
                .map(|(n, i)| y.value().data()[(n * 4 + ch) * 25 + i])
                .collect();
            let ym = ys.iter().sum::<f64>() / 50.0;
            let yv = ys.iter().map(|a| (a - ym).powi(2)).sum::<f64>() / 50.0;
            assert!(ym.abs() < 1e-6);
            assert!((yv - 1.0).abs() < 1e-5, "var {v} -> {yv}");
        }
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut st = BatchNormState::<f64>::new(1);
        st.update(&BatchStats { mean: vec![2.0], var: vec![3.0], count: 4 });
        assert!((st.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((st.running_var.data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_and_tiny_batch_are_rejected() {
        let x = c(Tensor::zeros([1, 3, 1, 1]));
        let st = BatchNormState::new(3);
        assert!(batch_norm2d(&x, &c(Tensor::ones([2])), &c(Tensor::zeros([3])), &st, Mode::Eval).is_err());
        assert!(batch_norm2d(&x, &c(Tensor::ones([3])), &c(Tensor::zeros([3])), &st, Mode::Train).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = c(Tensor::ones([3]));
        let y = layer_norm(&c(Tensor::ones([3])), &ones, &c(Tensor::zeros([3]))).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let y = layer_norm(
            &c(Tensor::new([2], vec![0.0, 2.0]).unwrap()),
            &c(Tensor::ones([2])),
            &c(Tensor::zeros([2])),
        )
        .unwrap();
        let s = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((y.value().data()[0] + s).abs() < 1e-12 && (y.value().data()[1] - s).abs() < 1e-12);

        let y = layer_norm(
            &c(rand_tensor(&[4, 2], 2)),
            &c(Tensor::zeros([2])),
            &c(Tensor::full([2], 5.0)),
        )
        .unwrap();
        assert!(y.value().data().iter().all(|&v| v == 5.0));
        assert!(layer_norm(&c(Tensor::zeros([2, 3])), &c(Tensor::ones([2])), &c(Tensor::zeros([2]))).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let opts = GradCheckOptions::default();
        let probe = c(rand_tensor(&[2, 3, 3, 4], 11));
        for mode in [Mode::Train, Mode::Eval] {
            let mut st = BatchNormState::new(3);
            st.running_mean = rand_tensor(&[3], 5);
            st.running_var = rand_tensor(&[3], 6).map(|v| v.abs() + 0.5);
            let r = check_fn(
                &[("x", rand_tensor(&[2, 3, 3, 4], 1)), ("g", rand_tensor(&[3], 2)), ("b", rand_tensor(&[3], 3))],
                |v| {
                    let (y, _) = batch_norm2d(&v[0], &v[1], &v[2], &st, mode)?;
                    Ok(sum(&mul(&mul(&y, &y)?, &probe)?))
                },
                &opts,
            )
            .unwrap();
            assert!(r.passed(1e-4), "{mode:?}: {r:?}");
        }
        let probe = c(rand_tensor(&[3, 5], 12));
        let r = check_fn(
            &[("x", rand_tensor(&[3, 5], 1)), ("g", rand_tensor(&[5], 2)), ("b", rand_tensor(&[5], 3))],
            |v| Ok(sum(&mul(&mul(&layer_norm(&v[0], &v[1], &v[2])?, &probe)?, &probe)?)),
            &opts,
        )
        .unwrap();
        assert!(r.passed(1e-4), "{r:?}");
    }
}
