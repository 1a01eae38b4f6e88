//! Class-activation heatmaps on the aggregated feature map.

use weedsense_tensor::ops;
use weedsense_tensor::{Mode, Scalar, Tape, Tensor, Var};

use crate::config::Task;
use crate::error::{Error, Result};
use crate::metrics::{argmax, argmax_labels};
use crate::model::Model;
use crate::params::Ctx;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `[1, 1, H/8, W/8]` in `[0, 1]`.
    pub map: Tensor<f32>,
    /// The scalar that was differentiated.
    pub target: f64,
    /// The weighted activation was constant (usually all zero); `map` is then zeros.
    pub degenerate: bool,
}

/// Scalar explained for each task: the summed logit of the most frequent non-background
/// predicted class over the pixels where it wins (background if nothing else wins),
/// the predicted height, or the logit of the predicted week.
fn target<T: Scalar>(model: &Model<T>, ctx: &Ctx<'_, T>, agg: &Var<T>, task: Task) -> Result<Var<T>> {
    let missing = || Error::config(format!("model was built without the {task} task"));
    match task {
        Task::Seg => {
            let head = model.net.seg_head.as_ref().ok_or_else(missing)?;
            let logits = head.forward(ctx, agg)?;
            let labels = argmax_labels(logits.value())?;
            let k = logits.shape()[1];
            let mut freq = vec![0usize; k];
            labels.iter().for_each(|&l| freq[l] += 1);
            let class = (1..k).filter(|&c| freq[c] > 0).max_by_key(|&c| (freq[c], std::cmp::Reverse(c))).unwrap_or(0);
            let plane = labels.len();
            let sel = Tensor::from_fn(logits.shape(), |i| {
                let (c, p) = (i / plane, i % plane);
                if c == class && labels[p] == class {
                    T::one()
                } else {
                    T::zero()
                }
            });
            Ok(ops::sum(&ops::mul(&logits, &Var::constant(sel))?))
        }
        Task::Height | Task::Week => {
            let g = model.net.growth.as_ref().ok_or_else(missing)?;
            let (f, _) = g.transform(ctx, agg)?;
            let (h, w) = g.task_heads(ctx, &f)?;
            if task == Task::Height {
                return Ok(ops::sum(&h.ok_or_else(missing)?));
            }
            let w = w.ok_or_else(missing)?;
            let best = argmax(w.value().data());
            let sel = Tensor::from_fn(w.shape(), |i| if i == best { T::one() } else { T::zero() });
            Ok(ops::sum(&ops::mul(&w, &Var::constant(sel))?))
        }
    }
}

/// Grad-CAM of `task` for a single `[1, 3, H, W]` image, in eval mode.
pub fn grad_cam<T: Scalar>(model: &Model<T>, x: &Tensor<T>, task: Task) -> Result<Heatmap> {
    if x.shape().first() != Some(&1) {
        return Err(Error::config(format!("grad-cam takes one image, got shape {:?}", x.shape())));
    }
    let ctx = Ctx::new(&model.params, None, Mode::Eval);
    let enc = model.net.encoder.forward(&ctx, &Var::constant(x.clone()))?;
    let tape = Tape::new();
    let agg = tape.param("aggregation", || enc.agg.value().clone());
    let t = target(model, &ctx, &agg, task)?;
    let grad = Tape::gradients_wrt(&t, &[&agg])?.remove(0);

    let (_, c, h, w) = agg.value().dims4("grad_cam")?;
    let (a, g) = (agg.value().data(), grad.data());
    let plane = h * w;
    let mut cam = vec![0f64; plane];
    for ch in 0..c {
        let alpha = g[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        for (p, out) in cam.iter_mut().enumerate() {
            *out += alpha * a[ch * plane + p].as_f64();
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let (lo, hi) = cam.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let degenerate = !(hi - lo > 1e-12 * hi.abs().max(1e-30));
    let map = if degenerate {
        Tensor::zeros([1, 1, h, w])
    } else {
        Tensor::new([1, 1, h, w], cam.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect())?
    };
    Ok(Heatmap {
        map,
        target: t.value().item()?.as_f64(),
        degenerate,
    })
}

impl Heatmap {
    /// Writes the map as an 8-bit grayscale PNG at its own resolution.
    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let s = self.map.shape();
        let (h, w) = (s[2], s[3]);
        let px = self.map.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, px).ok_or_else(|| Error::Format("heatmap buffer size".into()))?;
        img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Share of the heatmap's total mass in the upper half of the rows.
pub fn top_half_share(map: &Tensor<f32>) -> f64 {
    let s = map.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = map.data();
    let top: f64 = d[..(h / 2) * w].iter().map(|&v| v as f64).sum();
    let bottom: f64 = d[(h - h / 2) * w..h * w].iter().map(|&v| v as f64).sum();
    if top + bottom == 0.0 {
        0.5
    } else {
        top / (top + bottom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny() -> Model<f32> {
        Model::build(
            &ModelConfig {
                width_divisor: 8,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn maps_are_normalized_at_one_eighth_resolution() {
        let m = tiny();
        let x = Tensor::from_fn([1, 3, 64, 64], |i| ((i * 13) % 29) as f32 / 29.0 - 0.5);
        for task in [Task::Seg, Task::Height, Task::Week] {
            let h = grad_cam(&m, &x, task).unwrap();
            assert_eq!(h.map.shape(), &[1, 1, 8, 8]);
            assert!(h.map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn constant_image_does_not_fail() {
        let m = tiny();
        let x = Tensor::full([1, 3, 64, 64], 0.25f32);
        for task in [Task::Seg, Task::Height, Task::Week] {
            let h = grad_cam(&m, &x, task).unwrap();
            assert!(h.map.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn missing_task_is_a_config_error() {
        let cfg = ModelConfig {
            width_divisor: 8,
            ..ModelConfig::default()
        };
        let m = Model::<f32>::build_single_task(&cfg, Task::Height, 0).unwrap();
        let x = Tensor::zeros([1, 3, 64, 64]);
        assert_eq!(grad_cam(&m, &x, Task::Seg).unwrap_err().category(), "config");
    }
}
