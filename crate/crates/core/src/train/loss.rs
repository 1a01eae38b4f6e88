use serde::{Deserialize, Serialize};
use weedsense_tensor::ops;
use weedsense_tensor::{Scalar, Tensor, Var};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::config::ModelConfig;
use crate::model::ForwardOutput;

/// Multipliers of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub height: f64,
    pub week: f64,
    /// Applied to each auxiliary head.
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg: 1.0,
            height: 1.0,
            week: 1.0,
            aux: 1.0,
        }
    }
}

/// Unweighted terms and their weighted total. `aux` is the sum over the heads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg: f64,
    pub aux: f64,
    pub height: f64,
    pub week: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.seg, self.aux, self.height, self.week].iter().all(|v| v.is_finite())
    }
}

fn check_labels(batch: &Batch, num_classes: usize, num_weeks: usize) -> Result<()> {
    let per = batch.pixels_per_sample();
    for (i, id) in batch.ids.iter().enumerate() {
        if let Some(&l) = batch.masks[i * per..(i + 1) * per].iter().find(|&&l| l >= num_classes) {
            return Err(Error::data(id, format!("mask label {l} outside 0..{num_classes}")));
        }
        if batch.weeks[i] >= num_weeks {
            return Err(Error::data(id, format!("week {} outside 1..={num_weeks}", batch.weeks[i] + 1)));
        }
        if !(batch.heights[i] >= 0.0) {
            return Err(Error::data(id, format!("height {} cm is negative", batch.heights[i])));
        }
    }
    Ok(())
}

/// Weighted sum of per-pixel class-weighted cross-entropy on the segmentation and
/// auxiliary maps, squared error on height, and cross-entropy on the week logits.
///
/// The height error is measured in the head's own units, centimetres divided by
/// `cfg.height_scale`, so the output multiplier does not also inflate the height
/// gradient reaching the shared layers. At scale 1 this is the error in centimetres.
///
/// Terms for heads absent from `out` are zero. The reported total is recomputed in
/// `f64` from the reported terms.
pub fn multi_task_loss<T: Scalar>(
    out: &ForwardOutput<T>,
    batch: &Batch,
    class_weights: Option<&[f64]>,
    w: &LossWeights,
    cfg: &ModelConfig,
) -> Result<(Var<T>, LossBreakdown)> {
    let (num_classes, num_weeks) = (cfg.num_classes, cfg.num_weeks);
    check_labels(batch, num_classes, num_weeks)?;
    let mut parts: Vec<Var<T>> = Vec::new();
    let mut b = LossBreakdown::default();
    let mut push = |v: Var<T>, weight: f64| -> Result<f64> {
        let value = v.value().item()?.as_f64();
        parts.push(ops::scale(&v, weight));
        Ok(value)
    };
    if let Some(seg) = &out.seg {
        b.seg = push(ops::cross_entropy(seg, &batch.masks, class_weights)?, w.seg)?;
    }
    for a in &out.aux {
        b.aux += push(ops::cross_entropy(a, &batch.masks, class_weights)?, w.aux)?;
    }
    if let Some(h) = &out.height {
        let unit = cfg.height_scale;
        let target = Tensor::new(
            [batch.len(), 1],
            batch.heights.iter().map(|&v| T::from_f64_lossy(v / unit)).collect(),
        )?;
        let h = if unit == 1.0 { h.clone() } else { ops::scale(h, 1.0 / unit) };
        b.height = push(ops::mse(&h, &target)?, w.height)?;
    }
    if let Some(wk) = &out.week {
        b.week = push(ops::cross_entropy(wk, &batch.weeks, None)?, w.week)?;
    }
    b.total = w.seg * b.seg + w.aux * b.aux + w.height * b.height + w.week * b.week;
    let mut total = parts.pop().ok_or_else(|| Error::config("no task heads produced an output"))?;
    for p in parts.iter().rev() {
        total = ops::add(p, &total)?;
    }
    Ok((total, b))
}
