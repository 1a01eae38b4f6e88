use crate::autodiff::Var;
use crate::error::{Result, TensorError};
use crate::ops::shape::{permute, reshape};
use crate::scalar::Scalar;

/// Sub-pixel rearrangement `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`, where output pixel
/// `(h*r + i, w*r + j)` of channel `c` reads input channel `c*r*r + i*r + j`.
pub fn pixel_shuffle<T: Scalar>(x: &Var<T>, r: usize) -> Result<Var<T>> {
    let (n, cr, h, w) = x.value().dims4("pixel_shuffle")?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(TensorError::dim("pixel_shuffle", "channels", format!("{cr} not divisible by {r}^2")));
    }
    let c = cr / (r * r);
    let y = reshape(x, &[n, c, r, r, h, w])?;
    let y = permute(&y, &[0, 1, 4, 2, 5, 3])?;
    reshape(&y, &[n, c, h * r, w * r])
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Var<T>, r: usize) -> Result<Var<T>> {
    let (n, c, hr, wr) = x.value().dims4("pixel_unshuffle")?;
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(TensorError::dim("pixel_unshuffle", "height/width", format!("{hr}x{wr} not divisible by {r}")));
    }
    let (h, w) = (hr / r, wr / r);
    let y = reshape(x, &[n, c, h, r, w, r])?;
    let y = permute(&y, &[0, 1, 3, 5, 2, 4])?;
    reshape(&y, &[n, c * r * r, h, w])
}
