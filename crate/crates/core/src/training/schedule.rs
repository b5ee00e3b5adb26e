use serde::{Deserialize, Serialize};

use super::config::{Scheduler, TrainConfig};

/// Learning rates of the generator and the two discriminators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrTriple {
    pub g: f64,
    pub dim: f64,
    pub dst: f64,
}

/// Base rates halved once per `decay_every` completed epochs.
pub fn schedule_step_decay(base: LrTriple, epoch: usize, decay_every: usize) -> LrTriple {
    let factor = 0.5f64.powi((epoch / decay_every) as i32);
    LrTriple {
        g: base.g * factor,
        dim: base.dim * factor,
        dst: base.dst * factor,
    }
}

/// Linear ramp over `warmup_steps`, then inverse square-root decay; `step`
/// is 1-based.
pub fn schedule_warmup(step: u64, d_model: usize, warmup_steps: u64) -> f64 {
    let s = step.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup_steps as f64).powf(-1.5))
}

impl TrainConfig {
    pub fn base_rates(&self) -> LrTriple {
        LrTriple {
            g: self.lr_g,
            dim: self.lr_dim,
            dst: self.lr_dst,
        }
    }

    /// Rates in force for the 1-based global `step` taken in `epoch`.
    pub fn rates_at(&self, epoch: usize, step: u64, d_model: usize) -> LrTriple {
        match self.scheduler {
            Scheduler::StepDecay => schedule_step_decay(self.base_rates(), epoch, self.decay_every),
            Scheduler::Warmup => {
                let lr = schedule_warmup(step, d_model, self.warmup_steps);
                LrTriple { g: lr, dim: lr, dst: lr }
            }
        }
    }
}
