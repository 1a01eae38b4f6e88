use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax cross-entropy over axis 1 of `[N, C, ...]` logits against integer labels laid
/// out as `[N, ...]`.
///
/// With class weights the loss is `sum(w[y] * ce) / sum(w[y])`; it is zero when every
/// label has weight zero. Without weights it is the plain mean.
pub fn cross_entropy<T: Scalar>(logits: &Var<T>, labels: &[usize], weights: Option<&[f64]>) -> Result<Var<T>> {
    const OP: &str = "cross_entropy";
    let shape = logits.shape();
    if shape.len() < 2 {
        return Err(TensorError::dim(OP, "logits rank", format!("expected [N,C,...], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    if labels.len() != n * spatial {
        return Err(TensorError::dim(OP, "labels", format!("{} labels for logits {shape:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(TensorError::dim(OP, "label range", format!("label {bad} with {c} classes")));
    }
    if let Some(w) = weights {
        if w.len() != c {
            return Err(TensorError::dim(OP, "class weights", format!("{} weights for {c} classes", w.len())));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(TensorError::config(OP, "class weights must be finite and non-negative"));
        }
    }
    let wt = |y: usize| weights.map_or(1.0, |w| w[y]);
    let total_w: f64 = labels.iter().map(|&y| wt(y)).sum();
    let x = logits.value().data();
    // softmax probabilities, laid out like the logits
    let mut probs = vec![T::zero(); x.len()];
    let mut loss = 0.0f64;
    for b in 0..n {
        for s in 0..spatial {
            let at = |k: usize| (b * c + k) * spatial + s;
            let m = (0..c).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..c).map(|k| (x[at(k)] - m).exp()).sum();
            for k in 0..c {
                probs[at(k)] = (x[at(k)] - m).exp() / z;
            }
            let y = labels[b * spatial + s];
            let ce = (m + z.ln() - x[at(y)]).as_f64();
            loss += wt(y) * ce;
        }
    }
    let norm = if total_w > 0.0 { 1.0 / total_w } else { 0.0 };
    let labels = labels.to_vec();
    let per_label: Vec<f64> = (0..c).map(wt).collect();
    Ok(Var::from_op(
        Tensor::scalar(T::from_f64_lossy(loss * norm)),
        &[logits],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let g = args.grad.data()[0];
            let mut dx = probs.clone();
            for b in 0..n {
                for s in 0..spatial {
                    let y = labels[b * spatial + s];
                    let f = g * T::from_f64_lossy(per_label[y] * norm);
                    for k in 0..c {
                        let i = (b * c + k) * spatial + s;
                        let onehot = if k == y { T::one() } else { T::zero() };
                        dx[i] = f * (dx[i] - onehot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(args.inputs[0].shape().to_vec(), dx))]
        }),
    ))
}

/// Mean squared error against a constant target of the same shape.
pub fn mse<T: Scalar>(pred: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    if pred.shape() != target.shape() {
        return Err(TensorError::dim("mse", "target", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let n = T::from_f64_lossy(pred.value().numel() as f64);
    let diff: Vec<T> = pred.value().data().iter().zip(target.data()).map(|(&p, &t)| p - t).collect();
    let loss = diff.iter().fold(T::zero(), |a, &d| a + d * d) / n;
    Ok(Var::from_op(
        Tensor::scalar(loss),
        &[pred],
        Box::new(move |args: &BackwardArgs<'_, T>| {
            let k = args.grad.data()[0] * T::from_f64_lossy(2.0) / n;
            let g = diff.iter().map(|&d| d * k).collect();
            vec![Some(Tensor::from_parts(args.inputs[0].shape().to_vec(), g))]
        }),
    ))
}
