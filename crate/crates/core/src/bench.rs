//! Inference latency of the multi-task network against separate single-task networks.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use weedsense_tensor::{Mode, Tensor};

use crate::config::{ModelConfig, Task};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchOptions {
    pub input: (usize, usize),
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            input: (512, 512),
            batch: 1,
            warmup: 1,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub options: BenchOptions,
    pub multi_task: Timing,
    pub single_task: Vec<Timing>,
    pub single_task_sum_ms: f64,
    /// Multi-task median divided by the sum of single-task medians.
    pub ratio: f64,
}

impl BenchReport {
    /// Latency saved by running one multi-task network instead of the three single-task ones.
    pub fn reduction(&self) -> f64 {
        1.0 - self.ratio
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_model(label: String, model: &Model, x: &Tensor<f32>, opts: &BenchOptions) -> Result<Timing> {
    for _ in 0..opts.warmup {
        model.forward(x, Mode::Eval)?;
    }
    let mut samples_ms = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        let t = Instant::now();
        let out = model.forward(x, Mode::Eval)?;
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
        drop(out);
    }
    Ok(Timing {
        label,
        median_ms: median(&samples_ms),
        samples_ms,
    })
}

/// Times `cfg` with all tasks enabled and each task alone. Runs are interleaved by
/// model, not by repeat, so each model's timings share warm caches.
pub fn bench(cfg: &ModelConfig, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.repeats == 0 || opts.batch == 0 {
        return Err(Error::config("bench needs at least one repeat and a positive batch"));
    }
    let (h, w) = opts.input;
    let x = Tensor::from_fn([opts.batch, 3, h, w], |i| ((i * 7919) % 256) as f32 / 128.0 - 1.0);
    let multi = Model::<f32>::build(cfg, opts.seed)?;
    let multi_task = time_model("multi-task".into(), &multi, &x, opts)?;
    drop(multi);
    let mut single_task = Vec::new();
    for task in Task::ALL {
        let m = Model::<f32>::build_single_task(cfg, task, opts.seed)?;
        single_task.push(time_model(task.name().to_string(), &m, &x, opts)?);
    }
    let single_task_sum_ms: f64 = single_task.iter().map(|t| t.median_ms).sum();
    Ok(BenchReport {
        options: opts.clone(),
        ratio: multi_task.median_ms / single_task_sum_ms,
        multi_task,
        single_task,
        single_task_sum_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn tiny_bench_reports_every_task() {
        let cfg = ModelConfig {
            width_divisor: 8,
            ..ModelConfig::default()
        };
        let r = bench(
            &cfg,
            &BenchOptions {
                input: (64, 64),
                warmup: 0,
                repeats: 1,
                ..BenchOptions::default()
            },
        )
        .unwrap();
        assert_eq!(r.single_task.len(), 3);
        assert!(r.ratio > 0.0 && r.ratio.is_finite());
    }
}
