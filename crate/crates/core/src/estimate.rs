use serde::{Deserialize, Serialize};

use crate::config::EstimatorConfig;

/// Per-parameter linear-response estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Ensemble size (finite time) or number of batches (stationary).
    pub n_samples: usize,
    /// The reference average subtracted in the kernel terms.
    pub phi_avg: f64,
    pub phi_avg_se: f64,
    pub diagnostics: Option<TermBreakdown>,
    pub covector: Option<CovectorStats>,
    pub config: EstimatorConfig,
}

/// Split of each gradient component into the initial-condition term
/// `nu_0 . v_0`, the drift term `sum nu . df` and the diffusion term
/// `sum nu . dsigma b`. The three add up to the value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub init_term: Vec<f64>,
    pub drift_term: Vec<f64>,
    pub diffusion_term: Vec<f64>,
}

impl TermBreakdown {
    pub fn zeros(p: usize) -> Self {
        Self {
            init_term: vec![0.0; p],
            drift_term: vec![0.0; p],
            diffusion_term: vec![0.0; p],
        }
    }

    pub fn total(&self, param: usize) -> f64 {
        self.init_term[param] + self.drift_term[param] + self.diffusion_term[param]
    }
}

/// Size of the backward covector over the two halves of the orbit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovectorStats {
    /// max |nu_k| (infinity norm) over k < N/2
    pub max_norm_early: f64,
    /// max |nu_k| over k >= N/2
    pub max_norm_late: f64,
    /// Mean log growth rate of the undamped backward propagator, per time unit.
    pub undamped_growth_rate: f64,
}

impl CovectorStats {
    /// Ratio of the larger half-orbit maximum to the smaller one.
    pub fn half_ratio(&self) -> f64 {
        let hi = self.max_norm_early.max(self.max_norm_late);
        let lo = self.max_norm_early.min(self.max_norm_late);
        if lo > 0.0 {
            hi / lo
        } else if hi > 0.0 {
            f64::INFINITY
        } else {
            1.0
        }
    }

    /// No exponential trend across the orbit: the half maxima differ by less than 10x.
    pub fn is_bounded(&self) -> bool {
        self.half_ratio() < 10.0
    }
}
