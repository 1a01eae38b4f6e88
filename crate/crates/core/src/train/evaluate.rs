use weedsense_tensor::Mode;

use crate::data::{Batch, Normalization, Sample};
use crate::error::Result;
use crate::metrics::{argmax, argmax_labels, evaluate_labels, evaluate_regression, ConfusionMatrix, MetricsReport, SegMetrics};
use crate::model::Model;

/// Eval-mode metrics over `samples`, one image at a time.
pub fn evaluate(model: &Model<f32>, samples: &[Sample], norm: &Normalization) -> Result<MetricsReport> {
    let cfg = model.config();
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    let (mut h_pred, mut h_gt, mut w_pred, mut w_gt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        let batch = Batch::new(&[s], norm)?;
        let out = model.forward(&batch.images, Mode::Eval)?;
        if let Some(seg) = &out.seg {
            cm.add(&batch.masks, &argmax_labels(seg.value())?)?;
        }
        if let Some(h) = &out.height {
            h_pred.push(h.value().data()[0] as f64);
            h_gt.push(s.height_cm);
        }
        if let Some(w) = &out.week {
            w_pred.push(argmax(w.value().data()));
            w_gt.push(s.week_class());
        }
    }
    Ok(MetricsReport {
        samples: samples.len(),
        seg: cfg.tasks.seg.then(|| SegMetrics::from_confusion(&cm)),
        height: if cfg.tasks.height { Some(evaluate_regression(&h_pred, &h_gt)?) } else { None },
        week: if cfg.tasks.week { Some(evaluate_labels(&w_pred, &w_gt, cfg.num_weeks)?) } else { None },
    })
}
