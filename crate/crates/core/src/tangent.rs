//! Damped tangent equation and the tangent path-kernel estimators.
//!
//! On a fixed path the tangent of parameter `i` obeys
//!
//! ```text
//! v_{n+1} = -a_n v_n + grad f(x_n) v_n + d_i f(x_n) + (grad sigma(x_n) . v_n + d_i sigma(x_n)) b_n
//! ```
//!
//! where `a_n = alpha_n * time_step`. The kernel weights are
//! `a_n (b_n . v_n) / sigma(x_n)`. One sweep per parameter, so these
//! estimators are the reference for the adjoint ones rather than the
//! production route for many parameters.

use crate::config::EstimatorConfig;
use crate::error::{Error, Result};
use crate::estimate::GradientEstimate;
use crate::model::{dot, ensure_discrete, with_discrete, Model};
use crate::schedule::Schedule;
use crate::sim::{map_members, simulate_path, terminal_reference, Path};
use crate::stats::{batch_length, mean_and_stderr, time_average, BatchMeans};

/// Tangent vectors `v_0..v_N` for one parameter along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentPath {
    vectors: Vec<f64>,
    dim: usize,
    pub param_index: usize,
}

impl TangentPath {
    pub fn get(&self, n: usize) -> &[f64] {
        &self.vectors[n * self.dim..(n + 1) * self.dim]
    }

    /// Number of stored vectors, `N + 1`.
    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.vectors
            .chunks(self.dim)
            .map(|v| dot(v, v).sqrt())
            .collect()
    }
}

/// What the propagation hands to its visitor at step `n < N`.
pub(crate) struct TangentStep<'a> {
    pub n: usize,
    pub x: &'a [f64],
    pub b: &'a [f64],
    pub v: &'a [f64],
    pub sigma: f64,
    /// Discrete damping `alpha_n * time_step`.
    pub alpha: f64,
}

/// Propagates the tangent of `param` along `path`, calling `visit` before
/// each step and returning `(x_N, v_N)`.
pub(crate) fn propagate<M: Model + ?Sized>(
    model: &M,
    path: &Path,
    schedule: &Schedule,
    param: usize,
    mut visit: impl FnMut(&TangentStep<'_>),
) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_discrete(model)?;
    if param >= model.n_params() {
        return Err(Error::OutOfRange {
            index: param,
            len: model.n_params(),
        });
    }
    let m = model.dim();
    let h = model.time_step();
    let mut v = vec![0.0; m];
    model.initial_tangent(param, &mut v);
    let mut next = vec![0.0; m];
    let mut forcing = vec![0.0; m];
    let mut grad_sigma = vec![0.0; m];
    let mut x_last = vec![0.0; m];
    path.for_each_segment(model, false, |seg| {
        for n in seg.steps() {
            let x = seg.state(n);
            let b = seg.noise(n);
            let sigma = model.diffusion(x);
            if !(sigma > 0.0) {
                return Err(Error::NonPositiveDiffusion {
                    step: n,
                    member: None,
                    value: sigma,
                });
            }
            let alpha = schedule.at(n, x)? * h;
            visit(&TangentStep {
                n,
                x,
                b,
                v: &v,
                sigma,
                alpha,
            });
            model.jacobian_vec(x, &v, &mut next);
            model.param_drift_deriv(param, x, &mut forcing);
            model.diffusion_gradient(x, &mut grad_sigma);
            let noise_coeff = dot(&grad_sigma, &v) + model.param_diffusion_deriv(param, x);
            for i in 0..m {
                next[i] += -alpha * v[i] + forcing[i] + noise_coeff * b[i];
            }
            std::mem::swap(&mut v, &mut next);
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::BlowUp {
                    step: n + 1,
                    member: None,
                    detail: "tangent vector is not finite".into(),
                });
            }
        }
        if seg.start + seg.len == path.n_steps() {
            x_last.copy_from_slice(seg.state(path.n_steps()));
        }
        Ok(())
    })?;
    Ok((x_last, v))
}

/// Solves the damped tangent equation for parameter `param_index` along `path`.
pub fn tangent_sweep<M: Model + ?Sized>(
    model: &M,
    path: &Path,
    schedule: &Schedule,
    param_index: usize,
) -> Result<TangentPath> {
    let m = model.dim();
    let mut vectors = Vec::with_capacity((path.n_steps() + 1) * m);
    let (_, v_last) = propagate(model, path, schedule, param_index, |s| {
        vectors.extend_from_slice(s.v)
    })?;
    vectors.extend_from_slice(&v_last);
    Ok(TangentPath {
        vectors,
        dim: m,
        param_index,
    })
}

/// Per-path pieces of the finite-time tangent formula.
pub(crate) struct FiniteTangentTerms {
    /// `grad Phi(x_N) . v_N`
    pub path_term: f64,
    /// `sum_n a_n (b_n . v_n) / sigma_n`
    pub kernel_weight: f64,
    pub phi_terminal: f64,
}

impl FiniteTangentTerms {
    pub fn value(&self, phi_avg: f64) -> f64 {
        self.path_term + (self.phi_terminal - phi_avg) * self.kernel_weight
    }
}

pub(crate) fn finite_terms<M: Model + ?Sized>(
    model: &M,
    path: &Path,
    schedule: &Schedule,
    param: usize,
) -> Result<FiniteTangentTerms> {
    let mut kernel_weight = 0.0;
    let (x_last, v_last) = propagate(model, path, schedule, param, |s| {
        kernel_weight += s.alpha * dot(s.b, s.v) / s.sigma;
    })?;
    let mut grad_phi = vec![0.0; model.dim()];
    model.observable_gradient(&x_last, &mut grad_phi);
    Ok(FiniteTangentTerms {
        path_term: dot(&grad_phi, &v_last),
        kernel_weight,
        phi_terminal: path.terminal_observable(),
    })
}

/// Ensemble estimate of `d E[Phi(x_N)] / d gamma^i` by the tangent path-kernel formula.
pub fn tangent_finite_time_estimate<M: Model + ?Sized>(
    model: &M,
    config: &EstimatorConfig,
    schedule: &Schedule,
    param_index: usize,
) -> Result<GradientEstimate> {
    config.validate()?;
    if config.ensemble_size < 2 {
        return Err(Error::InvalidConfig(
            "finite-time estimates need at least two ensemble members".into(),
        ));
    }
    with_discrete!(model, config.dt, |m| finite_estimate(
        m,
        config,
        schedule,
        param_index
    ))
}

fn finite_estimate<M: Model + ?Sized>(
    model: &M,
    config: &EstimatorConfig,
    schedule: &Schedule,
    param: usize,
) -> Result<GradientEstimate> {
    let (phi_avg, phi_avg_se) = terminal_reference(model, config)?;
    let per_path = map_members(0..config.ensemble_size, |k| {
        let path = simulate_path(model, config, k)?;
        Ok(finite_terms(model, &path, schedule, param)?.value(phi_avg))
    })?;
    let (value, se) = mean_and_stderr(&per_path);
    Ok(GradientEstimate {
        values: vec![value],
        std_errors: vec![se],
        n_samples: config.ensemble_size,
        phi_avg,
        phi_avg_se,
        diagnostics: None,
        covector: None,
        config: config.clone(),
    })
}

/// Long-orbit estimate of `d E_mu[Phi] / d gamma^i` by the time-discretized
/// ergodic tangent formula
///
/// ```text
/// (1/N_ret) sum_n [ grad Phi_n . v_n + (Phi_{n+N_W} - Phi_avg) sum_{m<N_W} w_{n+m} ]
/// ```
///
/// with kernel weights `w_k = a_k (b_k . v_k) / sigma_k`, over the retained
/// steps of [`EstimatorConfig::retained_range`]. Each of the `K` members
/// runs its own orbit; the standard error comes from the pooled batch means.
pub fn tangent_ergodic_estimate<M: Model + ?Sized>(
    model: &M,
    config: &EstimatorConfig,
    schedule: &Schedule,
    param_index: usize,
) -> Result<GradientEstimate> {
    config.validate_ergodic()?;
    with_discrete!(model, config.dt, |m| ergodic_estimate(
        m,
        config,
        schedule,
        param_index
    ))
}

struct MemberErgodic {
    mean: f64,
    batch_means: Vec<f64>,
    phi_avg: f64,
    phi_avg_se: f64,
}

fn ergodic_estimate<M: Model + ?Sized>(
    model: &M,
    config: &EstimatorConfig,
    schedule: &Schedule,
    param: usize,
) -> Result<GradientEstimate> {
    let n_steps = config.n_steps;
    let window = config.window_steps;
    let retained = config.retained_range();
    let retained = retained.start..retained.end.min(n_steps + 1 - window);
    if retained.is_empty() {
        return Err(Error::OrbitTooShort(
            "no steps left after trimming the window".into(),
        ));
    }
    let members = map_members(0..config.ensemble_size, |k| {
        let path = simulate_path(model, config, k)?;
        let trace = path.observable_trace();
        let (phi_avg, phi_avg_se) = time_average(trace, config.burn_in_steps(), window);

        let mut path_terms = Vec::with_capacity(n_steps);
        let mut weights = Vec::with_capacity(n_steps + 1);
        let mut acc = 0.0;
        weights.push(acc);
        let mut grad_phi = vec![0.0; model.dim()];
        propagate(model, &path, schedule, param, |s| {
            model.observable_gradient(s.x, &mut grad_phi);
            path_terms.push(dot(&grad_phi, s.v));
            acc += s.alpha * dot(s.b, s.v) / s.sigma;
            weights.push(acc);
        })?;

        let bl = batch_length(retained.len(), window);
        let mut batches = BatchMeans::new(1, retained.start, retained.len(), bl);
        for n in retained.clone() {
            let kernel = (trace[n + window] - phi_avg) * (weights[n + window] - weights[n]);
            batches.add(n, 0, path_terms[n] + kernel);
        }
        let (mean, _) = batches.estimate(0);
        Ok(MemberErgodic {
            mean,
            batch_means: batches.means(0),
            phi_avg,
            phi_avg_se,
        })
    })?;

    let k = members.len() as f64;
    let value = members.iter().map(|m| m.mean).sum::<f64>() / k;
    let pooled: Vec<f64> = members.iter().flat_map(|m| m.batch_means.iter().copied()).collect();
    let (_, se) = mean_and_stderr(&pooled);
    let phi_avg = members.iter().map(|m| m.phi_avg).sum::<f64>() / k;
    let phi_avg_se = members.iter().map(|m| m.phi_avg_se.powi(2)).sum::<f64>().sqrt() / k;
    Ok(GradientEstimate {
        values: vec![value],
        std_errors: vec![se],
        n_samples: pooled.len(),
        phi_avg,
        phi_avg_se,
        diagnostics: None,
        covector: None,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StorageMode;
    use crate::model::{ModelSpec, TimeKind};

    /// x_{n+1} = a x_n + gamma + sigma b_n with the drift parameter gamma
    fn affine(a: f64, sigma: f64, v0: f64) -> ModelSpec {
        ModelSpec::builder(1, TimeKind::DiscreteMap)
            .drift(move |x, o| o[0] = a * x[0], move |_, j| j[0] = a)
            .constant_diffusion(sigma)
            .param(|_, o| o[0] = 1.0, |_| 0.0)
            .param(|_, o| o[0] = 0.0, |_| 0.0)
            .observable(|x| x[0], |_, g| g[0] = 1.0)
            .x0(vec![0.0])
            .v0(vec![vec![v0], vec![0.0]])
            .build()
            .unwrap()
    }

    #[test]
    fn geometric_tangent_of_affine_map() {
        let model = affine(0.5, 0.3, 0.0);
        let path = simulate_path(&model, &EstimatorConfig::finite_time(1.0, 3, 1, 1), 0).unwrap();
        let t = tangent_sweep(&model, &path, &Schedule::Constant(0.0), 0).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.get(1), &[1.0]);
        assert_eq!(t.get(2), &[1.5]);
        assert_eq!(t.get(3), &[1.75]);
    }

    #[test]
    fn zero_forcing_gives_zero_tangent() {
        let model = affine(0.9, 0.3, 0.0);
        let path = simulate_path(&model, &EstimatorConfig::finite_time(1.0, 20, 1, 1), 0).unwrap();
        let t = tangent_sweep(&model, &path, &Schedule::Constant(0.7), 1).unwrap();
        assert!(t.norms().iter().all(|&n| n == 0.0));
    }

    #[test]
    fn constant_damping_contracts_identity_map() {
        // grad f = I, no forcing: v_n = (1 - c)^n u
        let model = affine(1.0, 0.3, 2.0);
        let path = simulate_path(&model, &EstimatorConfig::finite_time(1.0, 8, 1, 1), 0).unwrap();
        let t = tangent_sweep(&model, &path, &Schedule::Constant(0.25), 1).unwrap();
        for n in 0..=8 {
            assert_eq!(t.get(n)[0], 0.0);
        }
        let t = tangent_sweep(&model, &path, &Schedule::Constant(0.25), 0).unwrap();
        // parameter 0 carries unit forcing, so check the homogeneous part via v0 alone
        let mut expected = 2.0;
        for n in 0..=8 {
            let forced: f64 = (0..n).map(|j| 0.75_f64.powi(j as i32)).sum();
            assert!((t.get(n)[0] - (expected + forced)).abs() < 1e-12, "n={n}");
            expected *= 0.75;
        }
    }

    #[test]
    fn tangent_recurrence_holds_on_a_nonlinear_model() {
        let model = ModelSpec::builder(2, TimeKind::DiscreteMap)
            .drift(
                |x, o| {
                    o[0] = 0.8 * x[0] + 0.1 * x[1] * x[1];
                    o[1] = 0.5 * x[1] - 0.2 * x[0];
                },
                |x, j| j.copy_from_slice(&[0.8, 0.2 * x[1], -0.2, 0.5]),
            )
            .diffusion(
                |x| 0.5 + 0.1 * x[0] * x[0],
                |x, g| g.copy_from_slice(&[0.2 * x[0], 0.0]),
            )
            .param(|x, o| o.copy_from_slice(&[1.0, x[0]]), |x| 0.1 * x[1])
            .observable(|x| x[0], |_, g| g.copy_from_slice(&[1.0, 0.0]))
            .x0(vec![0.3, -0.2])
            .build()
            .unwrap();
        let cfg = EstimatorConfig::finite_time(1.0, 30, 1, 4).with_storage(StorageMode::CheckpointReplay);
        let path = simulate_path(&model, &cfg, 0).unwrap();
        let schedule = Schedule::adapted(|n, x| 0.2 + 0.1 * (n % 3) as f64 + x[1].abs());
        let t = tangent_sweep(&model, &path, &schedule, 0).unwrap();
        let states = path.states(&model).unwrap();
        for n in 0..30 {
            let x = &states[2 * n..2 * n + 2];
            let b = crate::sim::replay_noise(&path, n).unwrap();
            let v = t.get(n);
            let alpha = schedule.at(n, x).unwrap();
            let gs = 0.2 * x[0] * v[0];
            let coeff = gs + 0.1 * x[1];
            let e0 = -alpha * v[0] + 0.8 * v[0] + 0.2 * x[1] * v[1] + 1.0 + coeff * b[0];
            let e1 = -alpha * v[1] - 0.2 * v[0] + 0.5 * v[1] + x[0] + coeff * b[1];
            let got = t.get(n + 1);
            assert!((got[0] - e0).abs() < 1e-12 && (got[1] - e1).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn finite_estimate_without_damping_is_pure_path_perturbation() {
        let model = affine(0.5, 0.3, 0.0);
        let cfg = EstimatorConfig::finite_time(1.0, 3, 16, 2);
        let est = tangent_finite_time_estimate(&model, &cfg, &Schedule::Constant(0.0), 0).unwrap();
        assert!((est.values[0] - 1.75).abs() < 1e-12);
        assert!(est.std_errors[0] < 1e-12);
    }

    #[test]
    fn finite_estimate_needs_two_members() {
        let model = affine(0.5, 0.3, 0.0);
        let cfg = EstimatorConfig::finite_time(1.0, 3, 1, 2);
        assert!(tangent_finite_time_estimate(&model, &cfg, &Schedule::Constant(0.0), 0).is_err());
    }

    #[test]
    fn ergodic_estimate_of_unforced_parameter_is_zero() {
        let model = affine(0.5, 0.3, 0.0);
        let cfg = EstimatorConfig::stationary(1.0, 400.0, 5.0, 3);
        let est = tangent_ergodic_estimate(&model, &cfg, &Schedule::Constant(0.5), 1).unwrap();
        assert_eq!(est.values[0], 0.0);
    }

    #[test]
    fn ergodic_window_must_fit() {
        let model = affine(0.5, 0.3, 0.0);
        let cfg = EstimatorConfig::stationary(1.0, 20.0, 10.0, 3);
        assert!(matches!(
            tangent_ergodic_estimate(&model, &cfg, &Schedule::Constant(0.5), 0),
            Err(Error::OrbitTooShort(_))
        ));
    }
}
