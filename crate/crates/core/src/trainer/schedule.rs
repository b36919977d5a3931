use std::f64::consts::PI;

use super::Stage;

/// Learning rate as a function of the 1-based optimizer step within one
/// stage occurrence. Both stages warm up linearly over the first
/// `ceil(warmup_fraction · total)` steps; stage 1 then holds its peak,
/// stage 2 decays to zero along a half cosine. Steps past `total` clamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub stage: Stage,
    pub peak: f64,
    pub total: usize,
    pub warmup: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.min(self.total);
        if s < self.warmup {
            return self.peak * s as f64 / self.warmup as f64;
        }
        match self.stage {
            Stage::ContentAsr => self.peak,
            Stage::DescriptorJoint => {
                if self.total == self.warmup {
                    return self.peak;
                }
                let progress = (s - self.warmup) as f64 / (self.total - self.warmup) as f64;
                self.peak * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

pub fn make_schedule(stage: Stage, total_steps: usize, peak: f64, warmup_fraction: f64) -> Schedule {
    let total = total_steps.max(1);
    let warmup = ((warmup_fraction * total as f64).ceil() as usize).min(total);
    Schedule {
        stage,
        peak,
        total,
        warmup,
    }
}
