use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters for every training mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Data-misfit tolerance weighting the mean-flow term.
    pub tau: f64,
    /// Observation noise std weighting the observation term.
    pub sigma: f64,
    /// Probability that the mean-flow term uses adapter noise.
    pub alpha: f64,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub ema_rate: f64,
    /// Use the EMA generator in the observation term. When false the active
    /// generator is used and receives gradients from that term.
    pub use_ema: bool,
    pub gamma: f64,
    pub power: f64,
    pub adaptive: bool,
    pub batch: usize,
    pub iters: usize,
    /// Probability of drawing `r = t`.
    pub rho_rt: f64,
    /// Reward strength (reward mode only).
    pub lambda: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Number of independent graphs per step. Zero picks the thread count.
    pub chunks: usize,
    pub log_every: usize,
    /// Checkpoint interval in steps; zero writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 100.0,
            sigma: 0.1,
            alpha: 1.0,
            lr_theta: 2e-4,
            lr_phi: 2e-4,
            ema_rate: 0.999,
            use_ema: true,
            gamma: 1e-3,
            power: 1.0,
            adaptive: true,
            batch: 512,
            iters: 10_000,
            rho_rt: 0.25,
            lambda: 1.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            chunks: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        pos("tau", self.tau)?;
        pos("sigma", self.sigma)?;
        pos("gamma", self.gamma)?;
        pos("power", self.power)?;
        pos("adam_eps", self.adam_eps)?;
        unit("alpha", self.alpha)?;
        unit("ema_rate", self.ema_rate)?;
        unit("rho_rt", self.rho_rt)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        for (name, v) in [
            ("lr_theta", self.lr_theta),
            ("lr_phi", self.lr_phi),
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }

    /// Chunk count actually used for a batch of `n` rows.
    pub fn effective_chunks(&self, n: usize) -> usize {
        let c = if self.chunks == 0 {
            crate::par::current_num_threads()
        } else {
            self.chunks
        };
        c.clamp(1, n.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range() {
        let bad = [
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { alpha: 1.5, ..Default::default() },
            TrainConfig { ema_rate: -0.1, ..Default::default() },
            TrainConfig { batch: 0, ..Default::default() },
            TrainConfig { gamma: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
