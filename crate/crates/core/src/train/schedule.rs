use serde::{Deserialize, Serialize};

/// Linear warmup followed by cosine annealing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub min_lr: f64,
    pub warmup_start_factor: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            base_lr: 2e-4,
            warmup_iters: 1500,
            total_iters: 1500,
            min_lr: 0.0,
            warmup_start_factor: 0.1,
        }
    }
}

impl ScheduleSpec {
    /// Learning rate for iteration `iter`; iterations past `total_iters` get the final rate.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter < self.warmup_iters {
            let f = self.warmup_start_factor;
            return self.base_lr * (f + (1.0 - f) * iter as f64 / self.warmup_iters as f64);
        }
        if self.total_iters <= self.warmup_iters {
            return self.base_lr;
        }
        let t = (iter.min(self.total_iters) - self.warmup_iters) as f64 / (self.total_iters - self.warmup_iters) as f64;
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
