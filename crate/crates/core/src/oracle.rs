//! Independent reference values for the estimators: closed forms for the
//! solvable zoo models and brute-force finite differences for the rest.

use serde::{Deserialize, Serialize};

use crate::config::EstimatorConfig;
use crate::error::{Error, Result};
use crate::model::{with_discrete, Model, ModelFamily};
use crate::sim::{map_members, run_forward};
use crate::stats::{mean_and_stderr, time_average};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    Analytic,
    ClosedFormRecursion,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    pub method: OracleMethod,
    /// Claimed absolute accuracy of `value`.
    pub tolerance: f64,
    pub detail: String,
}

/// Tolerance reported by exact oracles.
const EXACT: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuParam {
    DTheta,
    DSigma,
}

/// Stationary response of `E[x^2] = sigma^2 / (2 theta)` for
/// `dx = -theta x dt + sigma dB`.
pub fn ou_stationary_gradient(theta: f64, sigma: f64, which: OuParam) -> Result<OracleResult> {
    if !(theta > 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "OU oracle needs theta > 0 and sigma > 0, got {theta}, {sigma}"
        )));
    }
    let (value, detail) = match which {
        OuParam::DSigma => (sigma / theta, "d/dsigma of sigma^2/(2 theta)"),
        OuParam::DTheta => (
            -sigma * sigma / (2.0 * theta * theta),
            "d/dtheta of sigma^2/(2 theta)",
        ),
    };
    Ok(OracleResult {
        value,
        method: OracleMethod::Analytic,
        tolerance: EXACT * (1.0 + value.abs()),
        detail: detail.into(),
    })
}

/// `d E[x_N] / d gamma` for `x_{n+1} = a x_n + gamma + sigma b_n`.
pub fn affine_recursion_gradient(a: f64, n_steps: usize) -> OracleResult {
    let value = if a == 1.0 {
        n_steps as f64
    } else {
        (1.0 - a.powi(n_steps as i32)) / (1.0 - a)
    };
    OracleResult {
        value,
        method: OracleMethod::ClosedFormRecursion,
        tolerance: EXACT * (1.0 + value.abs()),
        detail: format!("geometric sum (1 - a^N)/(1 - a), a = {a}, N = {n_steps}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdMode {
    /// Same noise streams at both points.
    Crn,
    /// Fresh seeds at the minus point.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdTarget {
    /// `E[Phi(x_N)]` over the ensemble.
    FiniteTime,
    /// Time average of `Phi` along each orbit after burn-in.
    Stationary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub delta: f64,
    pub mode: FdMode,
    pub target: FdTarget,
    /// Permit common random numbers beyond five Lyapunov times.
    pub allow_chaotic_crn: bool,
}

impl FdOptions {
    pub fn crn(target: FdTarget) -> Self {
        Self {
            delta: 1e-4,
            mode: FdMode::Crn,
            target,
            allow_chaotic_crn: false,
        }
    }

    pub fn independent(delta: f64, target: FdTarget) -> Self {
        Self {
            delta,
            mode: FdMode::Independent,
            target,
            allow_chaotic_crn: false,
        }
    }
}

/// Seed offset for the minus point in independent mode.
const INDEPENDENT_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Lyapunov times beyond which common random numbers are refused.
const CRN_LYAPUNOV_LIMIT: f64 = 5.0;

struct PointEstimate {
    per_member: Vec<f64>,
    /// Within-orbit batch standard errors (stationary target only).
    member_se: Vec<f64>,
}

impl PointEstimate {
    fn mean(&self) -> f64 {
        mean_and_stderr(&self.per_member).0
    }

    fn stderr(&self) -> f64 {
        if self.member_se.is_empty() || self.per_member.len() >= 2 {
            mean_and_stderr(&self.per_member).1
        } else {
            let k = self.member_se.len() as f64;
            self.member_se.iter().map(|s| s * s).sum::<f64>().sqrt() / k
        }
    }
}

fn evaluate<M: Model + ?Sized>(
    model: &M,
    config: &EstimatorConfig,
    seed: u64,
    target: FdTarget,
) -> Result<PointEstimate> {
    let n = config.n_steps;
    match target {
        FdTarget::FiniteTime => {
            let per_member = map_members(0..config.ensemble_size, |k| {
                let mut last = f64::NAN;
                run_forward(model, seed, k, n, |i, x| {
                    if i == n {
                        last = model.observable(x);
                    }
                })?;
                Ok(last)
            })?;
            Ok(PointEstimate {
                per_member,
                member_se: Vec::new(),
            })
        }
        FdTarget::Stationary => {
            let pairs = map_members(0..config.ensemble_size, |k| {
                let mut trace = Vec::with_capacity(n + 1);
                run_forward(model, seed, k, n, |_, x| trace.push(model.observable(x)))?;
                Ok(time_average(&trace, config.burn_in_steps(), config.window_steps))
            })?;
            Ok(PointEstimate {
                per_member: pairs.iter().map(|p| p.0).collect(),
                member_se: pairs.iter().map(|p| p.1).collect(),
            })
        }
    }
}

fn evaluate_point(
    family: &dyn ModelFamily,
    params: &[f64],
    config: &EstimatorConfig,
    seed: u64,
    target: FdTarget,
) -> Result<PointEstimate> {
    let model = family.instantiate(params)?;
    let model: &dyn Model = &*model;
    with_discrete!(model, config.dt, |m| evaluate(m, config, seed, target))
}

/// Central difference `(E_{+delta} - E_{-delta}) / (2 delta)` of the
/// ensemble mean of `Phi(x_N)` or of the orbit time average, with the two
/// points simulated concurrently.
///
/// The reported tolerance is three standard errors of the difference (plus
/// a round-off floor); the `O(delta^2)` truncation error is not included.
pub fn finite_difference_gradient(
    family: &dyn ModelFamily,
    config: &EstimatorConfig,
    param_index: usize,
    opts: FdOptions,
) -> Result<OracleResult> {
    if !(opts.delta > 0.0) || !opts.delta.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "finite-difference delta must be positive, got {}",
            opts.delta
        )));
    }
    match opts.target {
        FdTarget::FiniteTime => config.validate()?,
        FdTarget::Stationary => config.validate_ergodic()?,
    }
    let base = family.params();
    if param_index >= base.len() {
        return Err(Error::OutOfRange {
            index: param_index,
            len: base.len(),
        });
    }
    if opts.mode == FdMode::Crn && !opts.allow_chaotic_crn {
        let model = family.instantiate(&base)?;
        if let Some(lambda) = model.lyapunov_hint() {
            let times = lambda * config.horizon();
            if times > CRN_LYAPUNOV_LIMIT {
                return Err(Error::InvalidConfig(format!(
                    "common random numbers over {times:.1} Lyapunov times decorrelate; \
                     use independent mode or set allow_chaotic_crn"
                )));
            }
        }
    }

    let mut plus = base.clone();
    let mut minus = base;
    plus[param_index] += opts.delta;
    minus[param_index] -= opts.delta;
    let minus_seed = match opts.mode {
        FdMode::Crn => config.seed,
        FdMode::Independent => config.seed.wrapping_add(INDEPENDENT_SEED_OFFSET),
    };
    let (hi, lo) = rayon::join(
        || evaluate_point(family, &plus, config, config.seed, opts.target),
        || evaluate_point(family, &minus, config, minus_seed, opts.target),
    );
    let (hi, lo) = (hi?, lo?);

    let two_delta = 2.0 * opts.delta;
    let value = (hi.mean() - lo.mean()) / two_delta;
    let se = match opts.mode {
        FdMode::Crn if hi.per_member.len() >= 2 => {
            let diffs: Vec<f64> = hi
                .per_member
                .iter()
                .zip(&lo.per_member)
                .map(|(a, b)| a - b)
                .collect();
            mean_and_stderr(&diffs).1 / two_delta
        }
        _ => (hi.stderr().powi(2) + lo.stderr().powi(2)).sqrt() / two_delta,
    };
    let floor = 1e-9 * (1.0 + value.abs());
    Ok(OracleResult {
        value,
        method: OracleMethod::FiniteDifference,
        tolerance: 3.0 * se + floor,
        detail: format!(
            "{:?} {:?} central difference, delta = {}, parameter {param_index}, standard error {se:.3e}",
            opts.mode, opts.target, opts.delta
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, TimeKind};

    #[test]
    fn analytic_values() {
        assert_eq!(ou_stationary_gradient(1.0, 0.5, OuParam::DSigma).unwrap().value, 0.5);
        assert_eq!(ou_stationary_gradient(1.0, 0.5, OuParam::DTheta).unwrap().value, -0.125);
        assert!(ou_stationary_gradient(1.0, 1e-12, OuParam::DSigma).unwrap().value < 1e-11);
        assert!(ou_stationary_gradient(0.0, 0.5, OuParam::DSigma).is_err());
        assert_eq!(affine_recursion_gradient(0.5, 3).value, 1.75);
        assert_eq!(affine_recursion_gradient(0.0, 1).value, 1.0);
        assert_eq!(affine_recursion_gradient(1.0, 4).value, 4.0);
    }

    /// `x_1 = g b_0` from `x_0 = 0`, `Phi = x^2`.
    struct OneStep;

    impl ModelFamily for OneStep {
        fn param_names(&self) -> Vec<String> {
            vec!["g".into()]
        }
        fn params(&self) -> Vec<f64> {
            vec![1.5]
        }
        fn instantiate(&self, p: &[f64]) -> Result<Box<dyn Model>> {
            let g = p[0];
            Ok(Box::new(
                ModelSpec::builder(1, TimeKind::DiscreteMap)
                    .drift(|_, o| o[0] = 0.0, |_, j| j[0] = 0.0)
                    .constant_diffusion(g)
                    .param(|_, o| o[0] = 0.0, |_| 1.0)
                    .observable(|x| x[0] * x[0], |x, g| g[0] = 2.0 * x[0])
                    .x0(vec![0.0])
                    .build()?,
            ))
        }
    }

    #[test]
    fn crn_difference_on_one_step_map() {
        let cfg = EstimatorConfig::finite_time(1.0, 1, 20_000, 4);
        let r = finite_difference_gradient(&OneStep, &cfg, 0, FdOptions::crn(FdTarget::FiniteTime))
            .unwrap();
        assert_eq!(r.method, OracleMethod::FiniteDifference);
        assert!((r.value - 3.0).abs() < r.tolerance.max(0.1), "{r:?}");
    }

    #[test]
    fn rejects_bad_delta_and_index() {
        let cfg = EstimatorConfig::finite_time(1.0, 1, 4, 4);
        let mut o = FdOptions::crn(FdTarget::FiniteTime);
        o.delta = 0.0;
        assert!(matches!(
            finite_difference_gradient(&OneStep, &cfg, 0, o),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            finite_difference_gradient(&OneStep, &cfg, 3, FdOptions::crn(FdTarget::FiniteTime)),
            Err(Error::OutOfRange { .. })
        ));
    }
}
