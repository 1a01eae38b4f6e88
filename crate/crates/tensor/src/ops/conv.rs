use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Result, TensorError};
use crate::profile::record_macs;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dOptions {
            stride,
            padding,
            groups,
        }
    }
}

/// Output length of a strided, zero-padded window along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn kdim(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin && self.groups > 1
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn macs(&self) -> usize {
        self.n * self.cout * self.cin_g() * self.kh * self.kw * self.ho * self.wo
    }
}

fn geometry(x: &[usize], w: &[usize], bias: Option<&[usize]>, opts: Conv2dOptions) -> Result<Geometry> {
    const OP: &str = "conv2d";
    let [n, cin, h, wd] = x[..] else {
        return Err(TensorError::dim(OP, "input rank", format!("expected [N,C,H,W], got {x:?}")));
    };
    let [cout, cin_g, kh, kw] = w[..] else {
        return Err(TensorError::dim(OP, "weight rank", format!("expected [Cout,Cin/groups,kh,kw], got {w:?}")));
    };
    if opts.groups == 0 || opts.stride == 0 {
        return Err(TensorError::config(OP, "stride and groups must be positive"));
    }
    if cin % opts.groups != 0 {
        return Err(TensorError::dim(OP, "input channels", format!("{cin} not divisible by groups {}", opts.groups)));
    }
    if cout % opts.groups != 0 {
        return Err(TensorError::dim(OP, "output channels", format!("{cout} not divisible by groups {}", opts.groups)));
    }
    if cin_g != cin / opts.groups {
        return Err(TensorError::dim(
            OP,
            "weight axis 1",
            format!("expected Cin/groups = {}, got {cin_g}", cin / opts.groups),
        ));
    }
    if let Some(b) = bias {
        if b != [cout] {
            return Err(TensorError::dim(OP, "bias", format!("expected [{cout}], got {b:?}")));
        }
    }
    let ho = conv_out_len(h, kh, opts.stride, opts.padding)
        .ok_or_else(|| TensorError::dim(OP, "height", format!("kernel {kh} exceeds padded height {h}+2*{}", opts.padding)))?;
    let wo = conv_out_len(wd, kw, opts.stride, opts.padding)
        .ok_or_else(|| TensorError::dim(OP, "width", format!("kernel {kw} exceeds padded width {wd}+2*{}", opts.padding)))?;
    Ok(Geometry {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        stride: opts.stride,
        pad: opts.padding,
        groups: opts.groups,
        ho,
        wo,
    })
}

/// Output columns `[lo, hi)` whose input coordinate `o*stride + k - pad` lies in `[0, len)`.
fn valid_range(out: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k - pad <= len - 1
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad < k + 1 {
        0
    } else {
        ((len + pad - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], channels: usize, g: &Geometry, cols: &mut [T]) {
    let hw_o = g.ho * g.wo;
    cols.fill(T::zero());
    for c in 0..channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                let row = ((c * g.kh + ky) * g.kw + kx) * hw_o;
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], channels: usize, g: &Geometry, dx: &mut [T]) {
    let hw_o = g.ho * g.wo;
    for c in 0..channels {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                let row = ((c * g.kh + ky) * g.kw + kx) * hw_o;
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        let ix = ox * g.stride + kx - g.pad;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &Geometry, out: &mut [T]) {
    let (plane_in, plane_out, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for n in 0..g.n {
        for c in 0..g.cin {
            let src = &x[(n * g.cin + c) * plane_in..][..plane_in];
            let dst = &mut out[(n * g.cin + c) * plane_out..][..plane_out];
            let wk = &w[c * kk..(c + 1) * kk];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                    let wv = wk[ky * g.kw + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for ox in ox_lo..ox_hi {
                            orow[ox] = orow[ox] + wv * row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &Geometry,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (plane_in, plane_out, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for n in 0..g.n {
        for c in 0..g.cin {
            let src = &x[(n * g.cin + c) * plane_in..][..plane_in];
            let gy = &dy[(n * g.cin + c) * plane_out..][..plane_out];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                    let k = ky * g.kw + kx;
                    let wv = w[c * kk + k];
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gy[oy * g.wo..(oy + 1) * g.wo];
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[(n * g.cin + c) * plane_in + iy * g.w..][..g.w];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                drow[ix] = drow[ix] + wv * grow[ox];
                            }
                        }
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        for ox in ox_lo..ox_hi {
                            acc = acc + grow[ox] * row[ox * g.stride + kx - g.pad];
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[c * kk + k] = dw[c * kk + k] + acc;
                    }
                }
            }
        }
    }
}

fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &Geometry) -> Tensor<T> {
    record_macs(g.macs());
    let hw_o = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.cout * hw_o];
    if g.depthwise() {
        depthwise_forward(x.data(), w.data(), g, &mut out);
    } else {
        let (cin_g, cout_g, kdim) = (g.cin_g(), g.cout_g(), g.kdim());
        let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); kdim * hw_o] };
        for n in 0..g.n {
            for grp in 0..g.groups {
                let xs = &x.data()[(n * g.cin + grp * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
                let colv: &[T] = if g.pointwise() {
                    xs
                } else {
                    im2col(xs, cin_g, g, &mut cols);
                    &cols
                };
                let ws = &w.data()[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                let os = &mut out[(n * g.cout + grp * cout_g) * hw_o..][..cout_g * hw_o];
                T::gemm(
                    cout_g,
                    kdim,
                    hw_o,
                    T::one(),
                    ws,
                    (kdim as isize, 1),
                    colv,
                    (hw_o as isize, 1),
                    T::zero(),
                    os,
                    (hw_o as isize, 1),
                );
            }
        }
    }
    if let Some(b) = b {
        for n in 0..g.n {
            for (c, &bv) in b.data().iter().enumerate() {
                for v in &mut out[(n * g.cout + c) * hw_o..][..hw_o] {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out)
}

/// 2-D cross-correlation with zero padding; depthwise when `groups == Cin == Cout`.
pub fn conv2d<T: Scalar>(x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>, opts: Conv2dOptions) -> Result<Var<T>> {
    let g = geometry(x.shape(), w.shape(), bias.map(|b| b.shape()), opts)?;
    let value = forward(x.value(), w.value(), bias.map(|b| b.value()), &g);
    let mut parents = vec![x, w];
    parents.extend(bias);
    Ok(Var::from_op(
        value,
        &parents,
        Box::new(move |args: &BackwardArgs<'_, T>| backward(args, &g)),
    ))
}

fn backward<T: Scalar>(args: &BackwardArgs<'_, T>, g: &Geometry) -> Vec<Option<Tensor<T>>> {
    let (x, w) = (args.inputs[0], args.inputs[1]);
    let dy = args.grad.data();
    let hw_o = g.ho * g.wo;
    let mut dx = args.needs[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = args.needs[1].then(|| vec![T::zero(); w.numel()]);

    if g.depthwise() {
        depthwise_backward(x.data(), w.data(), dy, g, dx.as_deref_mut(), dw.as_deref_mut());
    } else {
        let (cin_g, cout_g, kdim) = (g.cin_g(), g.cout_g(), g.kdim());
        let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); kdim * hw_o] };
        let mut dcols = if g.pointwise() || dx.is_none() { Vec::new() } else { vec![T::zero(); kdim * hw_o] };
        for n in 0..g.n {
            for grp in 0..g.groups {
                let gy = &dy[(n * g.cout + grp * cout_g) * hw_o..][..cout_g * hw_o];
                let ws = &w.data()[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                let x_off = (n * g.cin + grp * cin_g) * g.h * g.w;
                if let Some(dx) = dx.as_deref_mut() {
                    let target: &mut [T] = if g.pointwise() {
                        &mut dx[x_off..x_off + cin_g * g.h * g.w]
                    } else {
                        &mut dcols
                    };
                    // W^T (kdim x cout_g) . dY (cout_g x hw_o)
                    T::gemm(
                        kdim,
                        cout_g,
                        hw_o,
                        T::one(),
                        ws,
                        (1, kdim as isize),
                        gy,
                        (hw_o as isize, 1),
                        if g.pointwise() { T::one() } else { T::zero() },
                        target,
                        (hw_o as isize, 1),
                    );
                    if !g.pointwise() {
                        col2im(&dcols, cin_g, g, &mut dx[x_off..x_off + cin_g * g.h * g.w]);
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    let xs = &x.data()[x_off..x_off + cin_g * g.h * g.w];
                    let colv: &[T] = if g.pointwise() {
                        xs
                    } else {
                        im2col(xs, cin_g, g, &mut cols);
                        &cols
                    };
                    // dY (cout_g x hw_o) . cols^T (hw_o x kdim)
                    T::gemm(
                        cout_g,
                        hw_o,
                        kdim,
                        T::one(),
                        gy,
                        (hw_o as isize, 1),
                        colv,
                        (1, hw_o as isize),
                        T::one(),
                        &mut dw[grp * cout_g * kdim..(grp + 1) * cout_g * kdim],
                        (kdim as isize, 1),
                    );
                }
            }
        }
    }

    let mut grads = vec![
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    ];
    if args.inputs.len() == 3 {
        grads.push(args.needs[2].then(|| {
            let mut db = vec![T::zero(); g.cout];
            for n in 0..g.n {
                for (c, acc) in db.iter_mut().enumerate() {
                    *acc = *acc + dy[(n * g.cout + c) * hw_o..][..hw_o].iter().copied().sum::<T>();
                }
            }
            Tensor::from_parts(vec![g.cout], db)
        }));
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_fn, GradCheckOptions};
    use crate::ops::{mul, sum};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct loop over every output pixel.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, groups: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4("t").unwrap();
        let (cout, cin_g, kh, kw) = w.dims4("t").unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let cout_g = cout / groups;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for b in 0..n {
            for co in 0..cout {
                let grp = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin_g {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.at(&[b, grp * cin_g + ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                                }
                            }
                        }
                        let o = out.offset(&[b, co, oy, ox]);
                        out.data_mut()[o] = s;
                    }
                }
            }
        }
        let _ = cin;
        out
    }

    fn run(x: &Tensor<f64>, w: &Tensor<f64>, opts: Conv2dOptions) -> Tensor<f64> {
        conv2d(&Var::constant(x.clone()), &Var::constant(w.clone()), None, opts)
            .unwrap()
            .value()
            .clone()
    }

    #[test]
    fn identity_kernel_leaves_input_unchanged() {
        let x = Tensor::<f64>::ones([1, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 1, 1]);
        assert_eq!(run(&x, &w, Conv2dOptions::default()), x);
    }

    #[test]
    fn all_ones_kernel_counts_neighbours() {
        let x = Tensor::<f64>::ones([1, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = run(&x, &w, Conv2dOptions::new(1, 1, 1));
        let oracle = naive_conv(&x, &w, 1, 1, 1);
        assert_eq!(y, oracle);
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn depthwise_identity_kernels() {
        let x = rand_tensor(&[1, 2, 4, 5], 1);
        let mut w = Tensor::zeros([2, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        w.data_mut()[9 + 4] = 1.0;
        assert_eq!(run(&x, &w, Conv2dOptions::new(1, 1, 2)), x);
    }

    #[test]
    fn matches_naive_loops() {
        let cases = [
            ([2, 4, 7, 6], [6, 4, 3, 3], 1, 1, 1),
            ([1, 4, 8, 8], [4, 1, 3, 3], 2, 1, 4),
            ([2, 6, 9, 7], [6, 1, 5, 5], 1, 2, 6),
            ([1, 4, 6, 6], [4, 2, 3, 3], 2, 0, 2),
            ([2, 3, 5, 5], [5, 3, 1, 1], 1, 0, 1),
            ([1, 3, 8, 8], [4, 3, 3, 3], 2, 1, 1),
        ];
        for (i, (xs, ws, s, p, g)) in cases.into_iter().enumerate() {
            let x = rand_tensor(&xs, i as u64);
            let w = rand_tensor(&ws, 100 + i as u64);
            let y = run(&x, &w, Conv2dOptions::new(s, p, g));
            let o = naive_conv(&x, &w, s, p, g);
            assert_eq!(y.shape(), o.shape());
            for (a, b) in y.data().iter().zip(o.data()) {
                assert!((a - b).abs() < 1e-12, "case {i}");
            }
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Var::constant(Tensor::<f32>::zeros([1, 3, 4, 4]));
        let w = Var::constant(Tensor::zeros([4, 2, 3, 3]));
        match conv2d(&x, &w, None, Conv2dOptions::default()) {
            Err(TensorError::Dimension { axis, .. }) => assert_eq!(axis, "weight axis 1"),
            other => panic!("{other:?}"),
        }
        let w = Var::constant(Tensor::zeros([4, 3, 7, 7]));
        match conv2d(&x, &w, None, Conv2dOptions::default()) {
            Err(TensorError::Dimension { axis, .. }) => assert_eq!(axis, "height"),
            other => panic!("{other:?}"),
        }
        let w = Var::constant(Tensor::zeros([4, 1, 3, 3]));
        assert!(conv2d(&x, &w, None, Conv2dOptions::new(1, 1, 2)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cases = [
            ([2, 4, 6, 5], [6, 4, 3, 3], 1, 1, 1),
            ([2, 4, 7, 7], [4, 1, 3, 3], 2, 1, 4),
            ([1, 4, 6, 6], [4, 2, 3, 3], 2, 0, 2),
            ([2, 3, 4, 4], [5, 3, 1, 1], 1, 0, 1),
            ([1, 3, 6, 6], [3, 1, 5, 5], 1, 2, 3),
        ];
        for (i, (xs, ws, s, p, g)) in cases.into_iter().enumerate() {
            let x = rand_tensor(&xs, i as u64);
            let w = rand_tensor(&ws, 50 + i as u64);
            let b = rand_tensor(&[ws[0]], 70 + i as u64);
            let probe = Var::constant(rand_tensor(&[xs[0], ws[0], 1, 1], 9));
            let r = check_fn(
                &[("x", x), ("w", w), ("b", b)],
                |v| {
                    let y = conv2d(&v[0], &v[1], Some(&v[2]), Conv2dOptions::new(s, p, g))?;
                    Ok(sum(&mul(&mul(&y, &y)?, &probe)?))
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.passed(1e-4), "case {i}: {r:?}");
        }
    }
}
