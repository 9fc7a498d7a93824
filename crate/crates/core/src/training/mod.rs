//! Losses, optimizer and training loops.

mod config;
pub mod losses;
pub mod optim;
pub mod reward;
pub mod steps;

use std::fs::File;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

pub use config::TrainConfig;
pub use losses::{
    adaptive_scale, adaptive_weight, flow_map_bound, flow_matching_loss, kl_gaussian, mean_flow_loss, sample_rt,
};
pub use optim::AdamW;
pub use reward::{CenterReward, Reward};
pub use steps::{
    draw_for, mean_reward, step_with_draws, train_step, LossBreakdown, Objective, StepDraws, TrainData,
    TrainState,
};

use crate::error::Result;
use crate::par::Execution;

/// Step-indexed CSV log.
pub struct TrainLog {
    writer: csv::Writer<File>,
    /// Write `wall_ms = 0` so logs are reproducible byte for byte.
    deterministic: bool,
    started: Instant,
}

impl TrainLog {
    pub fn create(path: &Path, deterministic: bool) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["step", "mf", "obs", "kl", "reward", "total_raw", "total_scaled", "wall_ms"])?;
        Ok(Self {
            writer,
            deterministic,
            started: Instant::now(),
        })
    }

    pub fn record(&mut self, step: u64, l: &LossBreakdown) -> Result<()> {
        let wall = if self.deterministic {
            0
        } else {
            self.started.elapsed().as_millis()
        };
        self.writer.write_record([
            step.to_string(),
            format!("{:e}", l.mf),
            format!("{:e}", l.obs),
            format!("{:e}", l.kl),
            format!("{:e}", l.reward),
            format!("{:e}", l.total_raw),
            format!("{:e}", l.total_scaled),
            wall.to_string(),
        ])?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Runs `obj` until `state.step == cfg.iters`, so a resumed state continues
/// where it stopped. `hook` sees the state after every step.
#[allow(clippy::too_many_arguments)]
pub fn run_training<R, F>(
    obj: Objective,
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    reward: Option<&dyn Reward>,
    exec: Execution,
    rng: &mut R,
    mut log: Option<&mut TrainLog>,
    mut hook: F,
) -> Result<Vec<(u64, LossBreakdown)>>
where
    R: Rng + ?Sized,
    F: FnMut(&TrainState, &LossBreakdown) -> Result<()>,
{
    cfg.validate()?;
    let mut history = Vec::new();
    while (state.step as usize) < cfg.iters {
        let l = train_step(obj, state, data, cfg, reward, exec, rng)?;
        let step = state.step;
        let last = step as usize == cfg.iters;
        if cfg.log_every > 0 && (step % cfg.log_every as u64 == 0 || last) {
            log::debug!(
                "{obj:?} step {step}: mf {:.4e} obs {:.4e} kl {:.4e} total {:.4e}",
                l.mf,
                l.obs,
                l.kl,
                l.total_raw
            );
            if let Some(log) = log.as_deref_mut() {
                log.record(step, &l)?;
            }
            history.push((step, l));
        }
        hook(state, &l)?;
    }
    Ok(history)
}
