//! Finite-difference gradient checks of the primitive layers and of a whole network.

use weedsense_tensor::gradcheck::{check, check_fn, GradCheckOptions, GradCheckReport, GradCheckTarget};
use weedsense_tensor::ops::{self, AttentionWeights, BatchNormState, Conv2dOptions, PoolOptions};
use weedsense_tensor::{Mode, Tape, Tensor, TensorError, Var};

use crate::config::ModelConfig;
use crate::data::{synthesize_n, Batch, Normalization, SynthSpec};
use crate::error::Result;
use crate::model::Model;
use crate::params::{Ctx, ParamStore};
use crate::train::{multi_task_loss, LossWeights};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Absolute scale below which full-model gradient components compare absolutely.
pub const MODEL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed(self.tolerance)
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    weedsense_tensor::init::uniform(shape, 1.0, seed, "gradcheck")
}

/// Values bounded away from zero, for inputs of kinked functions.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand(shape, seed).map(|v| if v >= 0.0 { 0.2 + v } else { v - 0.2 })
}

/// Contracts `y` with a fixed random tensor so every output element matters differently.
fn project(y: &Var<f64>, seed: u64) -> weedsense_tensor::Result<Var<f64>> {
    let r = Var::constant(rand(y.shape(), seed ^ 0x5eed));
    Ok(ops::sum(&ops::mul(y, &r)?))
}

type Case = (&'static str, Vec<(&'static str, Tensor<f64>)>, Box<dyn Fn(&[Var<f64>]) -> weedsense_tensor::Result<Var<f64>>>);

fn cases() -> Vec<Case> {
    let conv = |stride, padding, groups| move |v: &[Var<f64>]| project(&ops::conv2d(&v[0], &v[1], Some(&v[2]), Conv2dOptions::new(stride, padding, groups))?, 1);
    vec![
        ("conv3x3", vec![("x", rand(&[2, 3, 6, 5], 1)), ("w", rand(&[4, 3, 3, 3], 2)), ("b", rand(&[4], 3))], Box::new(conv(1, 1, 1))),
        ("conv3x3_stride2", vec![("x", rand(&[1, 2, 7, 7], 4)), ("w", rand(&[3, 2, 3, 3], 5)), ("b", rand(&[3], 6))], Box::new(conv(2, 1, 1))),
        ("conv_depthwise5x5", vec![("x", rand(&[2, 3, 6, 6], 7)), ("w", rand(&[3, 1, 5, 5], 8)), ("b", rand(&[3], 9))], Box::new(conv(1, 2, 3))),
        ("conv1x1", vec![("x", rand(&[2, 4, 3, 3], 10)), ("w", rand(&[5, 4, 1, 1], 11)), ("b", rand(&[5], 12))], Box::new(conv(1, 0, 1))),
        (
            "batch_norm_train",
            vec![("x", rand(&[3, 2, 3, 3], 13)), ("g", rand(&[2], 14)), ("b", rand(&[2], 15))],
            Box::new(|v: &[Var<f64>]| {
                let st = BatchNormState::new(2);
                project(&ops::batch_norm2d(&v[0], &v[1], &v[2], &st, Mode::Train)?.0, 2)
            }),
        ),
        (
            "layer_norm",
            vec![("x", rand(&[3, 6], 16)), ("g", rand(&[6], 17)), ("b", rand(&[6], 18))],
            Box::new(|v: &[Var<f64>]| project(&ops::layer_norm(&v[0], &v[1], &v[2])?, 3)),
        ),
        (
            "linear",
            vec![("x", rand(&[2, 3, 4], 19)), ("w", rand(&[5, 4], 20)), ("b", rand(&[5], 21))],
            Box::new(|v: &[Var<f64>]| project(&ops::linear(&v[0], &v[1], Some(&v[2]))?, 4)),
        ),
        (
            "matmul",
            vec![("a", rand(&[2, 3, 4], 22)), ("b", rand(&[2, 5, 4], 23))],
            Box::new(|v: &[Var<f64>]| project(&ops::matmul(&v[0], &v[1], true)?, 5)),
        ),
        ("relu", vec![("x", away_from_zero(&[10], 24))], Box::new(|v: &[Var<f64>]| project(&ops::relu(&v[0]), 6))),
        ("gelu", vec![("x", rand(&[10], 25))], Box::new(|v: &[Var<f64>]| project(&ops::gelu(&v[0]), 7))),
        ("sigmoid", vec![("x", rand(&[10], 26))], Box::new(|v: &[Var<f64>]| project(&ops::sigmoid(&v[0]), 8))),
        ("softmax", vec![("x", rand(&[3, 5], 27))], Box::new(|v: &[Var<f64>]| project(&ops::softmax(&v[0]), 9))),
        (
            "multi_head_attention",
            vec![
                ("x", rand(&[2, 3, 4], 28)),
                ("q", rand(&[4, 4], 29)),
                ("k", rand(&[4, 4], 30)),
                ("v", rand(&[4, 4], 31)),
                ("o", rand(&[4, 4], 32)),
            ],
            Box::new(|v: &[Var<f64>]| {
                let w = AttentionWeights {
                    wq: &v[1],
                    wk: &v[2],
                    wv: &v[3],
                    wo: &v[4],
                };
                project(&ops::multi_head_attention(&v[0], &w, 2)?.0, 10)
            }),
        ),
        (
            "squeeze_excitation",
            vec![("x", rand(&[2, 4, 3, 3], 33)), ("w1", rand(&[2, 4, 1, 1], 34)), ("w2", rand(&[4, 2, 1, 1], 35))],
            Box::new(|v: &[Var<f64>]| project(&ops::se_gate(&v[0], &v[1], &v[2])?, 11)),
        ),
        ("pixel_shuffle", vec![("x", rand(&[1, 8, 2, 3], 36))], Box::new(|v: &[Var<f64>]| project(&ops::pixel_shuffle(&v[0], 2)?, 12))),
        (
            "max_pool",
            vec![("x", rand(&[1, 2, 5, 5], 37))],
            Box::new(|v: &[Var<f64>]| project(&ops::max_pool2d(&v[0], PoolOptions::new(3, 2, 1))?, 13)),
        ),
        (
            "avg_pool",
            vec![("x", rand(&[1, 2, 5, 5], 38))],
            Box::new(|v: &[Var<f64>]| project(&ops::avg_pool2d(&v[0], PoolOptions::new(3, 2, 1))?, 14)),
        ),
        ("adaptive_avg_pool", vec![("x", rand(&[1, 2, 5, 7], 39))], Box::new(|v: &[Var<f64>]| project(&ops::adaptive_avg_pool2d(&v[0], 2, 3)?, 15))),
        ("upsample_nearest", vec![("x", rand(&[1, 2, 2, 3], 40))], Box::new(|v: &[Var<f64>]| project(&ops::upsample_nearest(&v[0], 4)?, 16))),
        (
            "concat",
            vec![("a", rand(&[1, 2, 2, 2], 41)), ("b", rand(&[1, 3, 2, 2], 42))],
            Box::new(|v: &[Var<f64>]| project(&ops::concat(&[&v[0], &v[1]], 1)?, 17)),
        ),
        (
            "weighted_cross_entropy",
            vec![("x", rand(&[2, 3, 2, 2], 43))],
            Box::new(|v: &[Var<f64>]| ops::cross_entropy(&v[0], &[0, 1, 2, 2, 1, 1, 0, 2], Some(&[0.5, 2.0, 1.0]))),
        ),
        (
            "mse",
            vec![("x", rand(&[4, 1], 44))],
            Box::new(|v: &[Var<f64>]| ops::mse(&v[0], &Tensor::new([4, 1], vec![0.3, -1.0, 2.0, 0.0])?)),
        ),
    ]
}

/// Checks every primitive layer at every input coordinate in double precision.
pub fn primitive_suite() -> Result<Vec<CheckResult>> {
    let opts = GradCheckOptions::default();
    cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = check_fn(&inputs, |v| f(v), &opts)?;
            Ok(CheckResult {
                name: name.to_string(),
                report,
                tolerance: PRIMITIVE_TOLERANCE,
            })
        })
        .collect()
}

/// The small network used by the full-model check: widths divided by 8.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        width_divisor: 8,
        ..ModelConfig::default()
    }
}

struct ModelTarget {
    model: Model<f64>,
    names: Vec<String>,
    batch: Batch,
    images: Tensor<f64>,
}

impl GradCheckTarget for ModelTarget {
    fn inputs(&self) -> Vec<(String, usize)> {
        self.names.iter().map(|n| (n.clone(), self.model.params.values[n].numel())).collect()
    }

    fn get(&self, input: usize, index: usize) -> f64 {
        self.model.params.values[&self.names[input]].data()[index]
    }

    fn set(&mut self, input: usize, index: usize, value: f64) {
        let t = self.model.params.values.get_mut(&self.names[input]).expect("known parameter");
        t.data_mut()[index] = value;
    }

    fn loss(&self, tape: Option<&Tape<f64>>) -> weedsense_tensor::Result<Var<f64>> {
        let ctx = Ctx::new(&self.model.params, tape, Mode::Train).with_dropout_seed(7);
        let cfg = self.model.config();
        let run = || -> Result<Var<f64>> {
            let out = self.model.net.forward(&ctx, &Var::constant(self.images.clone()))?;
            Ok(multi_task_loss(&out, &self.batch, None, &LossWeights::default(), cfg)?.0)
        };
        run().map_err(|e| match e {
            crate::error::Error::Tensor(t) => t,
            other => TensorError::Usage(other.to_string()),
        })
    }
}

/// Central differences of the full multi-task training loss (segmentation, auxiliary,
/// height and week terms, batch-norm in training mode) with respect to
/// `coords_per_tensor` sampled entries of every parameter tensor.
pub fn full_model_check(cfg: &ModelConfig, input: usize, batch: usize, coords_per_tensor: usize, seed: u64) -> Result<CheckResult> {
    let spec = SynthSpec {
        image_size: (input, input),
        px_per_cm: 0.3 * input as f64 / 128.0,
        seed,
        ..SynthSpec::default()
    };
    let mut samples = synthesize_n(&spec, batch)?;
    // keep the squared-error term on the same scale as the others
    for s in &mut samples {
        s.height_cm = (s.height_cm / 50.0).min(2.0);
    }
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::new(&refs, &Normalization::IMAGENET)?;
    let model32 = Model::<f32>::build(cfg, seed)?;
    let params: ParamStore<f64> = model32.params.cast();
    let model = Model { net: model32.net, params };
    let mut target = ModelTarget {
        names: model.params.values.keys().cloned().collect(),
        images: batch.images.cast(),
        model,
        batch,
    };
    let opts = GradCheckOptions {
        max_coords: Some(coords_per_tensor),
        seed,
        // the loss is O(10), so components below this are dominated by difference noise
        floor: MODEL_FLOOR,
        ..GradCheckOptions::default()
    };
    let report = check(&mut target, &opts)?;
    Ok(CheckResult {
        name: format!("full model {} at {input}x{input}", cfg.label()),
        report,
        tolerance: MODEL_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for r in primitive_suite().unwrap() {
            assert!(r.passed(), "{}: {:?}", r.name, r.report);
            assert!(r.report.checked > 0);
        }
    }

    #[test]
    fn tiny_model_passes() {
        let r = full_model_check(&tiny_config(), 64, 4, 2, 3).unwrap();
        assert!(r.passed(), "{:?}", r.report);
    }
}
