use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Mode;

/// Inverted dropout: in train mode each element is zeroed with probability `p` and the
/// survivors are scaled by `1/(1-p)`; the mask is drawn from `seed`. Eval mode is the
/// identity.
pub fn dropout<T: Scalar>(x: &Var<T>, p: f64, mode: Mode, seed: u64) -> Result<Var<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::config("dropout", format!("probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.value().numel())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let out = x.value().data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
    Ok(Var::from_op(
        Tensor::from_parts(x.shape().to_vec(), out),
        &[x],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let g = args.grad.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
            vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), g))]
        }),
    ))
}
