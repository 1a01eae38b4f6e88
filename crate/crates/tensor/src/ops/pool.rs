use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Result, TensorError};
use crate::ops::conv::conv_out_len;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolOptions {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolOptions {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolOptions { kernel, stride, padding }
    }
}

fn pooled_dims(op: &'static str, h: usize, w: usize, o: PoolOptions) -> Result<(usize, usize)> {
    if o.kernel == 0 || o.stride == 0 || o.padding * 2 > o.kernel {
        return Err(TensorError::config(op, format!("invalid kernel/stride/padding {o:?}")));
    }
    let oh = conv_out_len(h, o.kernel, o.stride, o.padding)
        .ok_or_else(|| TensorError::dim(op, "height", format!("{h} too small for {o:?}")))?;
    let ow = conv_out_len(w, o.kernel, o.stride, o.padding)
        .ok_or_else(|| TensorError::dim(op, "width", format!("{w} too small for {o:?}")))?;
    Ok((oh, ow))
}

/// Max pooling over `[N,C,H,W]`; padding never wins. Ties route the gradient to the
/// first maximal position in row-major window order.
pub fn max_pool2d<T: Scalar>(x: &Var<T>, o: PoolOptions) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4("max_pool2d")?;
    let (oh, ow) = pooled_dims("max_pool2d", h, w, o)?;
    let xd = x.value().data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut at = base;
                for ky in 0..o.kernel {
                    let Some(iy) = (oy * o.stride + ky).checked_sub(o.padding).filter(|&v| v < h) else { continue };
                    for kx in 0..o.kernel {
                        let Some(ix) = (ox * o.stride + kx).checked_sub(o.padding).filter(|&v| v < w) else { continue };
                        let v = xd[base + iy * w + ix];
                        if v > best {
                            best = v;
                            at = base + iy * w + ix;
                        }
                    }
                }
                out.push(best);
                arg.push(at);
            }
        }
    }
    let in_shape = x.shape().to_vec();
    Ok(Var::from_op(
        Tensor::from_parts(vec![n, c, oh, ow], out),
        &[x],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let mut dx = Tensor::zeros(in_shape.clone());
            let d = dx.data_mut();
            for (&i, &g) in arg.iter().zip(args.grad.data()) {
                d[i] = d[i] + g;
            }
            vec![Some(dx)]
        }),
    ))
}

/// Average pooling over `[N,C,H,W]`. Zero padding counts towards the divisor, so every
/// window divides by `kernel^2`.
pub fn avg_pool2d<T: Scalar>(x: &Var<T>, o: PoolOptions) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4("avg_pool2d")?;
    let (oh, ow) = pooled_dims("avg_pool2d", h, w, o)?;
    let inv = T::from_f64_lossy(1.0 / (o.kernel * o.kernel) as f64);
    let window = move |oy: usize, ox: usize, f: &mut dyn FnMut(usize)| {
        for ky in 0..o.kernel {
            let Some(iy) = (oy * o.stride + ky).checked_sub(o.padding).filter(|&v| v < h) else { continue };
            for kx in 0..o.kernel {
                let Some(ix) = (ox * o.stride + kx).checked_sub(o.padding).filter(|&v| v < w) else { continue };
                f(iy * w + ix);
            }
        }
    };
    let xd = x.value().data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                window(oy, ox, &mut |i| s = s + src[i]);
                out.push(s * inv);
            }
        }
    }
    let in_shape = x.shape().to_vec();
    Ok(Var::from_op(
        Tensor::from_parts(vec![n, c, oh, ow], out),
        &[x],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let mut dx = Tensor::zeros(in_shape.clone());
            let d = dx.data_mut();
            let g = args.grad.data();
            for plane in 0..n * c {
                let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(plane * oh + oy) * ow + ox] * inv;
                        window(oy, ox, &mut |i| dst[i] = dst[i] + gv);
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Window `[start, end)` of adaptive pooling bin `i` out of `out` over length `len`.
fn adaptive_window(i: usize, out: usize, len: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

/// Adaptive average pooling to `[N,C,oh,ow]` with floor/ceil bin edges.
pub fn adaptive_avg_pool2d<T: Scalar>(x: &Var<T>, oh: usize, ow: usize) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4("adaptive_avg_pool2d")?;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(TensorError::dim("adaptive_avg_pool2d", "output size", format!("output {oh}x{ow} for input {h}x{w}")));
    }
    let xd = x.value().data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, ow, w);
                let mut s = T::zero();
                for y in y0..y1 {
                    for v in &src[y * w + x0..y * w + x1] {
                        s = s + *v;
                    }
                }
                out.push(s / T::from_f64_lossy(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    let in_shape = x.shape().to_vec();
    Ok(Var::from_op(
        Tensor::from_parts(vec![n, c, oh, ow], out),
        &[x],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let mut dx = Tensor::zeros(in_shape.clone());
            let d = dx.data_mut();
            let g = args.grad.data();
            for plane in 0..n * c {
                let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                for oy in 0..oh {
                    let (y0, y1) = adaptive_window(oy, oh, h);
                    for ox in 0..ow {
                        let (x0, x1) = adaptive_window(ox, ow, w);
                        let gv = g[(plane * oh + oy) * ow + ox] / T::from_f64_lossy(((y1 - y0) * (x1 - x0)) as f64);
                        for y in y0..y1 {
                            for v in &mut dst[y * w + x0..y * w + x1] {
                                *v = *v + gv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Global average pooling, `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_avg_pool<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    adaptive_avg_pool2d(x, 1, 1)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Var<T>, factor: usize) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4("upsample_nearest")?;
    if factor == 0 {
        return Err(TensorError::config("upsample_nearest", "factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.value().data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            let row = &xd[(plane * h + oy / factor) * w..][..w];
            out.extend((0..ow).map(|ox| row[ox / factor]));
        }
    }
    let in_shape = x.shape().to_vec();
    Ok(Var::from_op(
        Tensor::from_parts(vec![n, c, oh, ow], out),
        &[x],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let mut dx = Tensor::zeros(in_shape.clone());
            let d = dx.data_mut();
            for (i, &g) in args.grad.data().iter().enumerate() {
                let (plane, rest) = (i / (oh * ow), i % (oh * ow));
                let (oy, ox) = (rest / ow, rest % ow);
                let j = (plane * h + oy / factor) * w + ox / factor;
                d[j] = d[j] + g;
            }
            vec![Some(dx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_fn, GradCheckOptions};
    use crate::ops::{mul, sum};

    fn seq(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| ((i * 7919) % 97) as f64 / 10.0)
    }

    fn probe(shape: &[usize]) -> Var<f64> {
        Var::constant(Tensor::from_fn(shape.to_vec(), |i| (i as f64 * 0.53).sin()))
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Var::constant(Tensor::from_fn([1, 1, 4, 4], |i| i as f64));
        let y = max_pool2d(&x, PoolOptions::new(2, 2, 0)).unwrap();
        assert_eq!(y.value().data(), &[5.0, 7.0, 13.0, 15.0]);
        let y = max_pool2d(&x, PoolOptions::new(3, 2, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.value().data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn avg_pool_counts_padding() {
        let x = Var::constant(Tensor::<f64>::ones([1, 1, 4, 4]));
        let y = avg_pool2d(&x, PoolOptions::new(3, 2, 1)).unwrap();
        // corner window sees 4 real ones out of 9
        assert!((y.value().data()[0] - 4.0 / 9.0).abs() < 1e-12);
        assert!((y.value().data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_windows_cover_uneven_lengths() {
        assert_eq!(adaptive_window(0, 3, 5), (0, 2));
        assert_eq!(adaptive_window(1, 3, 5), (1, 4));
        assert_eq!(adaptive_window(2, 3, 5), (3, 5));
        let x = Var::constant(Tensor::from_fn([1, 2, 3, 3], |i| i as f64));
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.value().data(), &[4.0, 13.0]);
    }

    #[test]
    fn adaptive_pool_full_size_is_identity() {
        let x = Var::constant(seq(&[2, 3, 4, 5]));
        assert_eq!(adaptive_avg_pool2d(&x, 4, 5).unwrap().value(), x.value());
        let g = Var::constant(Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        assert_eq!(global_avg_pool(&g).unwrap().value().data(), &[4.0]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Var::constant(Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.value().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn pooling_rejects_bad_geometry() {
        let x = Var::constant(Tensor::<f64>::ones([1, 1, 2, 2]));
        assert!(max_pool2d(&x, PoolOptions::new(3, 1, 0)).is_err());
        assert!(avg_pool2d(&x, PoolOptions::new(2, 0, 0)).is_err());
        assert!(adaptive_avg_pool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let opts = GradCheckOptions::default();
        let x = seq(&[2, 2, 5, 6]);
        for (name, f) in [
            ("max", Box::new(|v: &Var<f64>| max_pool2d(v, PoolOptions::new(3, 2, 1))) as Box<dyn Fn(&Var<f64>) -> Result<Var<f64>>>),
            ("avg", Box::new(|v: &Var<f64>| avg_pool2d(v, PoolOptions::new(3, 2, 1)))),
            ("adaptive", Box::new(|v: &Var<f64>| adaptive_avg_pool2d(v, 2, 4))),
            ("up", Box::new(|v: &Var<f64>| upsample_nearest(v, 3))),
        ] {
            let shape = f(&Var::constant(x.clone())).unwrap().shape().to_vec();
            let p = probe(&shape);
            let r = check_fn(&[("x", x.clone())], |v| Ok(sum(&mul(&f(&v[0])?, &p)?)), &opts).unwrap();
            assert!(r.passed(1e-6), "{name}: {r:?}");
        }
    }
}
