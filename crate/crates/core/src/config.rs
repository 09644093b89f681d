use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StorageMode {
    /// States and noises of the whole orbit are kept in memory.
    #[default]
    FullInMemory,
    /// Every `ceil(sqrt(N))`-th state is kept; noise is regenerated from its
    /// counter and segments are re-simulated during backward sweeps.
    CheckpointReplay,
}

/// How the finite-time reference value `Phi^avg_N = E[Phi(x_N)]` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiAvgMode {
    /// Mean of `Phi(x_N)` over the same ensemble (O(1/K) bias).
    #[default]
    SameEnsemble,
    /// Mean over an independent pilot ensemble of the same size.
    Pilot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Time step; 1 for raw discrete maps.
    pub dt: f64,
    /// Number of steps `N`.
    pub n_steps: usize,
    /// Decorrelation window in steps, `N_W = W / dt`.
    #[serde(default)]
    pub window_steps: usize,
    /// Number of ensemble members `K`.
    pub ensemble_size: usize,
    pub seed: u64,
    /// Drop the biased ends (and a burn-in) in ergodic mode.
    #[serde(default = "default_trim")]
    pub trim: bool,
    #[serde(default)]
    pub storage_mode: StorageMode,
    #[serde(default)]
    pub phi_avg: PhiAvgMode,
}

fn default_trim() -> bool {
    true
}

/// Number of whole steps of length `dt` in `duration`.
pub fn steps_for(duration: f64, dt: f64) -> usize {
    (duration / dt).round() as usize
}

impl EstimatorConfig {
    /// Ensemble configuration for a finite-time response.
    pub fn finite_time(dt: f64, n_steps: usize, ensemble_size: usize, seed: u64) -> Self {
        Self {
            dt,
            n_steps,
            window_steps: 0,
            ensemble_size,
            seed,
            trim: false,
            storage_mode: StorageMode::FullInMemory,
            phi_avg: PhiAvgMode::SameEnsemble,
        }
    }

    /// Single-orbit configuration for a stationary response over horizon `t`
    /// with decorrelation window `w` (both in time units).
    pub fn stationary(dt: f64, t: f64, w: f64, seed: u64) -> Self {
        Self {
            dt,
            n_steps: steps_for(t, dt),
            window_steps: steps_for(w, dt),
            ensemble_size: 1,
            seed,
            trim: true,
            storage_mode: StorageMode::FullInMemory,
            phi_avg: PhiAvgMode::SameEnsemble,
        }
    }

    pub fn with_storage(mut self, mode: StorageMode) -> Self {
        self.storage_mode = mode;
        self
    }

    pub fn with_ensemble(mut self, k: usize) -> Self {
        self.ensemble_size = k;
        self
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps must be at least 1".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::InvalidConfig("ensemble_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Steps dropped before any ergodic statistic is taken.
    pub fn burn_in_steps(&self) -> usize {
        if self.trim {
            self.window_steps
        } else {
            0
        }
    }

    /// Half-open range of steps `k` whose contributions enter an ergodic average.
    pub fn retained_range(&self) -> std::ops::Range<usize> {
        if self.trim {
            let start = self.burn_in_steps() + self.window_steps;
            start..self.n_steps.saturating_sub(self.window_steps)
        } else {
            0..self.n_steps
        }
    }

    pub fn validate_ergodic(&self) -> Result<()> {
        self.validate()?;
        if self.window_steps == 0 {
            return Err(Error::InvalidConfig(
                "ergodic mode needs a decorrelation window of at least one step".into(),
            ));
        }
        let needed = 2 * self.window_steps + self.burn_in_steps();
        if self.n_steps <= needed {
            return Err(Error::OrbitTooShort(format!(
                "{} steps but ergodic mode with window {} needs more than {needed}",
                self.n_steps, self.window_steps
            )));
        }
        Ok(())
    }

    pub(crate) fn checkpoint_stride(&self) -> usize {
        (self.n_steps as f64).sqrt().ceil().max(1.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_step_counts() {
        let c = EstimatorConfig::stationary(0.002, 2000.0, 2.0, 1);
        assert_eq!(c.n_steps, 1_000_000);
        assert_eq!(c.window_steps, 1000);
        assert_eq!(c.retained_range(), 2000..999_000);
    }

    #[test]
    fn ergodic_length_checks() {
        let mut c = EstimatorConfig::stationary(1.0, 30.0, 10.0, 1);
        assert!(matches!(c.validate_ergodic(), Err(Error::OrbitTooShort(_))));
        c.n_steps = 31;
        assert!(c.validate_ergodic().is_ok());
        c.window_steps = 0;
        assert!(c.validate_ergodic().is_err());
        c.trim = false;
        c.window_steps = 5;
        assert_eq!(c.retained_range(), 0..31);
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = EstimatorConfig::stationary(0.01, 50.0, 5.0, 9)
            .with_storage(StorageMode::CheckpointReplay);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"checkpoint-replay\""));
        let back: EstimatorConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
