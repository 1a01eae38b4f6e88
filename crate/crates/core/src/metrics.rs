//! Segmentation, height and growth-week metrics.

use serde::{Deserialize, Serialize};
use weedsense_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel argmax over the class axis of `[N, C, H, W]` logits.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, c, h, w) = logits.dims4("argmax_labels")?;
    let d = logits.data();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * plane + p] > d[(b * c + best) * plane + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Square confusion matrix, rows ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::config(format!("{} labels vs {} predictions", gt.len(), pred.len())));
        }
        let k = self.classes;
        if let Some(&l) = gt.iter().chain(pred).find(|&&l| l >= k) {
            return Err(Error::data("evaluation", format!("label {l} outside 0..{k}")));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// `(tp, fp, fn)` of class `c`.
    pub fn outcomes(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
        (tp, col - tp, row - tp)
    }

    pub fn in_gt(&self, c: usize) -> bool {
        (0..self.classes).any(|p| self.get(c, p) > 0)
    }

    fn present(&self, c: usize) -> bool {
        let (tp, fp, fn_) = self.outcomes(c);
        tp + fp + fn_ > 0
    }

    /// IoU of every class, `None` for classes absent from both ground truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let (tp, fp, fn_) = self.outcomes(c);
                self.present(c).then(|| tp as f64 / (tp + fp + fn_) as f64)
            })
            .collect()
    }

    pub fn f1(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let (tp, fp, fn_) = self.outcomes(c);
                self.present(c).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
            })
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let p: Vec<f64> = v.iter().flatten().copied().collect();
    if p.is_empty() {
        0.0
    } else {
        p.iter().sum::<f64>() / p.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub mf1: f64,
    pub pixel_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

impl SegMetrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let iou = cm.iou();
        SegMetrics {
            miou: mean_present(&iou),
            mf1: mean_present(&cm.f1()),
            pixel_accuracy: cm.accuracy(),
            per_class_iou: iou,
        }
    }
}

/// Metrics of predicted against ground-truth label maps of equal length.
pub fn evaluate_segmentation(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<SegMetrics> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(gt, pred)?;
    Ok(SegMetrics::from_confusion(&cm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightMetrics {
    pub mae_cm: f64,
    pub rmse_cm: f64,
    /// `None` when the ground truth has zero variance.
    pub r2: Option<f64>,
    pub max_error_cm: f64,
    pub within_1cm: f64,
    pub within_2cm: f64,
    pub within_5cm: f64,
}

/// Tolerance rates count `|error| <= tolerance`.
pub fn evaluate_regression(pred: &[f64], gt: &[f64]) -> Result<HeightMetrics> {
    if pred.len() != gt.len() || gt.len() < 2 {
        return Err(Error::config(format!("regression needs two equal-length lists of at least 2, got {} and {}", pred.len(), gt.len())));
    }
    let n = gt.len() as f64;
    let err: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
    let sse: f64 = err.iter().map(|e| e * e).sum();
    let mean = gt.iter().sum::<f64>() / n;
    let sst: f64 = gt.iter().map(|g| (g - mean) * (g - mean)).sum();
    let within = |t: f64| err.iter().filter(|e| e.abs() <= t).count() as f64 / n;
    Ok(HeightMetrics {
        mae_cm: err.iter().map(|e| e.abs()).sum::<f64>() / n,
        rmse_cm: (sse / n).sqrt(),
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        max_error_cm: err.iter().fold(0.0, |m, e| m.max(e.abs())),
        within_1cm: within(1.0),
        within_2cm: within(2.0),
        within_5cm: within(5.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekMetrics {
    pub accuracy: f64,
    /// Mean F1 over classes that occur in the ground truth.
    pub macro_f1: f64,
}

pub fn evaluate_labels(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<WeekMetrics> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(gt, pred)?;
    let f1 = cm.f1();
    let in_gt: Vec<Option<f64>> = (0..num_classes).map(|c| if cm.in_gt(c) { f1[c] } else { None }).collect();
    Ok(WeekMetrics {
        accuracy: cm.accuracy(),
        macro_f1: mean_present(&in_gt),
    })
}

/// Argmax accuracy and macro-F1 of `[N, classes]` logits.
pub fn evaluate_classification<T: Scalar>(logits: &Tensor<T>, gt: &[usize]) -> Result<WeekMetrics> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != gt.len() {
        return Err(Error::config(format!("logits {s:?} do not match {} labels", gt.len())));
    }
    let pred: Vec<usize> = logits.data().chunks(s[1]).map(argmax).collect();
    evaluate_labels(&pred, gt, s[1])
}

/// Table-shaped evaluation result; absent tasks are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub seg: Option<SegMetrics>,
    pub height: Option<HeightMetrics>,
    pub week: Option<WeekMetrics>,
}
