//! Adjoint path-kernel sweeps.
//!
//! One backward sweep per path produces the covector `nu`, which is then
//! shared by every parameter: the gradient with respect to parameter `i` is
//! `nu_0 . v_0^i + sum_k nu_{k+1} . (d_i f_k + d_i sigma_k b_k)`.
//!
//! Both sweeps use the discrete recursion
//!
//! ```text
//! nu_k = -a_k nu_{k+1} + grad f_k^T nu_{k+1} + grad sigma_k (b_k . nu_{k+1}) + xi_k
//! ```
//!
//! with `a_k = alpha_k * h` (`h` the model's time step) and
//!
//! * finite time: `nu_N = grad Phi(x_N)`, `xi_k = (Phi(x_N) - Phi_avg) a_k b_k / sigma_k`;
//! * ergodic: `nu_N = 0`, `xi_k = h grad Phi_k + h (a_k / sigma_k) S_k b_k`, where
//!   `S_k` sums `Phi_{k+m} - Phi_avg` over the next `N_W` steps.
//!
//! For Euler maps of SDEs these are exactly the continuous-time recursions
//! written with `dB_k = sqrt(dt) b_k`.

use crate::config::EstimatorConfig;
use crate::error::{Error, Result};
use crate::estimate::{CovectorStats, GradientEstimate, TermBreakdown};
use crate::model::{dot, ensure_discrete, norm_inf, with_discrete, Model};
use crate::schedule::Schedule;
use crate::sim::{map_members, simulate_path, terminal_reference, Path};
use crate::stats::{batch_length, mean_and_stderr, time_average, BatchMeans, WindowSums};
use crate::tangent::{finite_terms, propagate};

/// The sweep aborts once `|nu_k|` exceeds this multiple of the largest
/// terminal or source magnitude seen.
pub const COVECTOR_BLOW_UP_FACTOR: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    FiniteTime,
    Ergodic,
}

/// Backward covectors `nu_0..nu_N` of one path.
#[derive(Debug, Clone)]
pub struct CovectorPath {
    covectors: Vec<f64>,
    dim: usize,
    pub mode: SweepMode,
    /// Human-readable description of the source terms `xi_k` used.
    pub source_terms: String,
    pub stats: CovectorStats,
}

impl CovectorPath {
    pub fn get(&self, k: usize) -> &[f64] {
        &self.covectors[k * self.dim..(k + 1) * self.dim]
    }

    /// `N + 1`
    pub fn len(&self) -> usize {
        self.covectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.covectors.is_empty()
    }

    pub fn max_norm(&self) -> f64 {
        norm_inf(&self.covectors)
    }
}

/// Inputs available when the sweep is at step `k` with `nu_{k+1}` known.
pub(crate) struct AdjointStep<'a> {
    pub k: usize,
    pub x: &'a [f64],
    pub b: &'a [f64],
    pub nu_next: &'a [f64],
}

struct SweepResult {
    nu0: Vec<f64>,
    covectors: Option<Vec<f64>>,
    stats: CovectorStats,
}

/// Core backward recursion shared by both modes.
///
/// `terminal` maps `x_N` to `nu_N`; `source(k, x_k, b_k, sigma_k, a_k, xi)`
/// writes `xi_k`; `visit` sees `nu_{k+1}` before `nu_k` is formed. Steps
/// run strictly backward, `k = N-1, ..., 0`.
fn backward_sweep<M: Model + ?Sized>(
    model: &M,
    path: &Path,
    schedule: &Schedule,
    terminal: impl FnOnce(&[f64]) -> Vec<f64>,
    mut source: impl FnMut(usize, &[f64], &[f64], f64, f64, &mut [f64]),
    mut visit: impl FnMut(&AdjointStep<'_>) -> Result<()>,
    store: bool,
) -> Result<SweepResult> {
    ensure_discrete(model)?;
    let m = model.dim();
    let n_steps = path.n_steps();
    let h = model.time_step();
    let half = n_steps / 2;

    let mut terminal = Some(terminal);
    let mut nu = vec![0.0; m];
    let mut nu_next = vec![0.0; m];
    let mut jt = vec![0.0; m];
    let mut grad_sigma = vec![0.0; m];
    let mut xi = vec![0.0; m];
    let mut covectors = if store {
        vec![0.0; (n_steps + 1) * m]
    } else {
        Vec::new()
    };
    let mut scale = 0.0_f64;
    let mut max_early = 0.0_f64;
    let mut max_late = 0.0_f64;
    let mut log_growth = 0.0;
    let mut growth_steps = 0usize;

    path.for_each_segment(model, true, |seg| {
        if let Some(t) = terminal.take() {
            nu_next = t(seg.state(n_steps));
            scale = norm_inf(&nu_next);
            max_late = scale;
            if store {
                covectors[n_steps * m..].copy_from_slice(&nu_next);
            }
        }
        for k in seg.steps().rev() {
            let x = seg.state(k);
            let b = seg.noise(k);
            visit(&AdjointStep {
                k,
                x,
                b,
                nu_next: &nu_next,
            })?;
            let sigma = model.diffusion(x);
            if !(sigma > 0.0) {
                return Err(Error::NonPositiveDiffusion {
                    step: k,
                    member: None,
                    value: sigma,
                });
            }
            let a = schedule.at(k, x)? * h;
            model.jacobian_transpose_vec(x, &nu_next, &mut jt);
            model.diffusion_gradient(x, &mut grad_sigma);
            let b_nu = dot(b, &nu_next);
            for i in 0..m {
                jt[i] += grad_sigma[i] * b_nu;
            }
            let before = dot(&nu_next, &nu_next);
            if before > 0.0 {
                log_growth += 0.5 * (dot(&jt, &jt) / before).ln();
                growth_steps += 1;
            }
            source(k, x, b, sigma, a, &mut xi);
            scale = scale.max(norm_inf(&xi));
            for i in 0..m {
                nu[i] = -a * nu_next[i] + jt[i] + xi[i];
            }
            let size = norm_inf(&nu);
            if !size.is_finite() || size > COVECTOR_BLOW_UP_FACTOR * scale {
                let rate = if growth_steps > 0 {
                    log_growth / (growth_steps as f64 * h)
                } else {
                    f64::NAN
                };
                return Err(Error::CovectorBlowUp {
                    step: k,
                    member: None,
                    suggested_alpha: rate,
                });
            }
            if k < half {
                max_early = max_early.max(size);
            } else {
                max_late = max_late.max(size);
            }
            if store {
                covectors[k * m..(k + 1) * m].copy_from_slice(&nu);
            }
            std::mem::swap(&mut nu, &mut nu_next);
        }
        Ok(())
    })?;

    let undamped_growth_rate = if growth_steps > 0 {
        log_growth / (growth_steps as f64 * h)
    } else {
        0.0
    };
    Ok(SweepResult {
        nu0: nu_next,
        covectors: store.then_some(covectors),
        stats: CovectorStats {
            max_norm_early: max_early,
            max_norm_late: max_late,
            undamped_growth_rate,
        },
    })
}

fn finite_terminal<'a, M: Model + ?Sized>(model: &'a M) -> impl FnOnce(&[f64]) -> Vec<f64> + 'a {
    move |x_last: &[f64]| {
        let mut g = vec![0.0; model.dim()];
        model.observable_gradient(x_last, &mut g);
        g
    }
}

fn finite_source(
    phi_terminal: f64,
    phi_avg: f64,
) -> impl FnMut(usize, &[f64], &[f64], f64, f64, &mut [f64]) {
    let weight = phi_terminal - phi_avg;
    move |_, _, b, sigma, a, xi| {
        let c = weight * a / sigma;
        for (o, bi) in xi.iter_mut().zip(b) {
            *o = c * bi;
        }
    }
}

fn ergodic_source<'a, M: Model + ?Sized>(
    model: &'a M,
    windows: &'a WindowSums,
) -> impl FnMut(usize, &[f64], &[f64], f64, f64, &mut [f64]) + 'a {
    let h = model.time_step();
    move |k, x, b, sigma, a, xi| {
        model.observable_gradient(x, xi);
        let c = h * a / sigma * windows.get(k);
        for (o, bi) in xi.iter_mut().zip(b) {
            *o = h * *o + c * bi;
        }
    }
}

/// Finite-time backward sweep: `nu_N = grad Phi(x_N)`, kernel sources
/// weighted by `Phi(x_N) - phi_avg`.
pub fn adjoint_sweep_finite<M: Model + ?Sized>(
    model: &M,
    path: &Path,
    schedule: &Schedule,
    phi_avg: f64,
) -> Result<CovectorPath> {
    let r = backward_sweep(
        model,
        path,
        schedule,
        finite_terminal(model),
        finite_source(path.terminal_observable(), phi_avg),
        |_| Ok(()),
        true,
    )?;
    Ok(CovectorPath {
        covectors: r.covectors.unwrap_or_default(),
        dim: model.dim(),
        mode: SweepMode::FiniteTime,
        source_terms: format!(
            "(Phi(x_N) - {phi_avg}) * a_k b_k / sigma_k with Phi(x_N) = {}",
            path.terminal_observable()
        ),
        stats: r.stats,
    })
}

/// Ergodic backward sweep with zero terminal condition and windowed kernel
/// sources. Windows near the end are truncated to the available steps.
pub fn adjoint_sweep_ergodic<M: Model + ?Sized>(
    model: &M,
    path: &Path,
    schedule: &Schedule,
    phi_avg: f64,
    window_steps: usize,
) -> Result<CovectorPath> {
    let windows = WindowSums::new(path.observable_trace(), phi_avg, window_steps);
    let r = backward_sweep(
        model,
        path,
        schedule,
        |_| vec![0.0; model.dim()],
        ergodic_source(model, &windows),
        |_| Ok(()),
        true,
    )?;
    Ok(CovectorPath {
        covectors: r.covectors.unwrap_or_default(),
        dim: model.dim(),
        mode: SweepMode::Ergodic,
        source_terms: format!(
            "h grad Phi_k + h a_k/sigma_k b_k sum_(m=1..{window_steps}) (Phi_(k+m) - {phi_avg})"
        ),
        stats: r.stats,
    })
}

/// Per-parameter accumulation of `nu_{k+1} . d_i f_k` and
/// `d_i sigma_k (b_k . nu_{k+1})`.
struct Accumulator {
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    buf: Vec<f64>,
}

impl Accumulator {
    fn new(p: usize, m: usize) -> Self {
        Self {
            drift: vec![0.0; p],
            diffusion: vec![0.0; p],
            buf: vec![0.0; m],
        }
    }

    /// Adds the step's contributions and returns nothing; `each` receives
    /// `(param, drift, diffusion)` for side accumulation.
    fn add<M: Model + ?Sized>(
        &mut self,
        model: &M,
        s: &AdjointStep<'_>,
        mut each: impl FnMut(usize, f64, f64),
    ) {
        let b_nu = dot(s.b, s.nu_next);
        for i in 0..self.drift.len() {
            model.param_drift_deriv(i, s.x, &mut self.buf);
            let d = dot(&self.buf, s.nu_next);
            let g = model.param_diffusion_deriv(i, s.x) * b_nu;
            self.drift[i] += d;
            self.diffusion[i] += g;
            each(i, d, g);
        }
    }
}

struct MemberFinite {
    terms: TermBreakdown,
    stats: CovectorStats,
}

/// Ensemble estimate of `d E[Phi(x_N)] / d gamma` for all parameters at
/// once: one forward pass and one backward sweep per member.
///
/// SDE models are discretized with `config.dt`; the accumulated increments
/// are then `dF dt + dsigma dB`.
pub fn adjoint_finite_time_gradient<M: Model + ?Sized>(
    model: &M,
    config: &EstimatorConfig,
    schedule: &Schedule,
) -> Result<GradientEstimate> {
    config.validate()?;
    if config.ensemble_size < 2 {
        return Err(Error::InvalidConfig(
            "finite-time estimates need at least two ensemble members".into(),
        ));
    }
    with_discrete!(model, config.dt, |m| finite_gradient(m, config, schedule))
}

fn finite_gradient<M: Model + ?Sized>(
    model: &M,
    config: &EstimatorConfig,
    schedule: &Schedule,
) -> Result<GradientEstimate> {
    let p = model.n_params();
    let m = model.dim();
    let (phi_avg, phi_avg_se) = terminal_reference(model, config)?;
    let members = map_members(0..config.ensemble_size, |k| {
        let path = simulate_path(model, config, k)?;
        let mut acc = Accumulator::new(p, m);
        let r = backward_sweep(
            model,
            &path,
            schedule,
            finite_terminal(model),
            finite_source(path.terminal_observable(), phi_avg),
            |s| {
                acc.add(model, s, |_, _, _| {});
                Ok(())
            },
            false,
        )?;
        let mut v0 = vec![0.0; m];
        let init_term = (0..p)
            .map(|i| {
                model.initial_tangent(i, &mut v0);
                dot(&r.nu0, &v0)
            })
            .collect();
        Ok(MemberFinite {
            terms: TermBreakdown {
                init_term,
                drift_term: acc.drift,
                diffusion_term: acc.diffusion,
            },
            stats: r.stats,
        })
    })?;

    let k = members.len() as f64;
    let mut mean_terms = TermBreakdown::zeros(p);
    let mut values = Vec::with_capacity(p);
    let mut std_errors = Vec::with_capacity(p);
    for i in 0..p {
        let per_member: Vec<f64> = members.iter().map(|mm| mm.terms.total(i)).collect();
        let (value, se) = mean_and_stderr(&per_member);
        values.push(value);
        std_errors.push(se);
        mean_terms.init_term[i] = members.iter().map(|mm| mm.terms.init_term[i]).sum::<f64>() / k;
        mean_terms.drift_term[i] = members.iter().map(|mm| mm.terms.drift_term[i]).sum::<f64>() / k;
        mean_terms.diffusion_term[i] =
            members.iter().map(|mm| mm.terms.diffusion_term[i]).sum::<f64>() / k;
    }
    Ok(GradientEstimate {
        values,
        std_errors,
        n_samples: members.len(),
        phi_avg,
        phi_avg_se,
        diagnostics: Some(mean_terms),
        covector: Some(merge_stats(members.iter().map(|mm| &mm.stats))),
        config: config.clone(),
    })
}

fn merge_stats<'a>(stats: impl Iterator<Item = &'a CovectorStats>) -> CovectorStats {
    let mut out = CovectorStats {
        max_norm_early: 0.0,
        max_norm_late: 0.0,
        undamped_growth_rate: 0.0,
    };
    let mut count = 0.0;
    for s in stats {
        out.max_norm_early = out.max_norm_early.max(s.max_norm_early);
        out.max_norm_late = out.max_norm_late.max(s.max_norm_late);
        out.undamped_growth_rate += s.undamped_growth_rate;
        count += 1.0;
    }
    if count > 0.0 {
        out.undamped_growth_rate /= count;
    }
    out
}

struct MemberStationary {
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    batch_means: Vec<Vec<f64>>,
    phi_avg: f64,
    phi_avg_se: f64,
    stats: CovectorStats,
}

/// Long-orbit estimate of the stationary response `d E_mu[Phi] / d gamma`
/// for all parameters from one backward sweep per orbit:
///
/// ```text
/// 1/(N_ret h) sum_{k retained} nu_{k+1} . (d_i f_k + d_i sigma_k b_k)
/// ```
///
/// Retained steps skip a burn-in of `N_W` steps plus `N_W` steps at each end
/// when trimming is on. Standard errors are batch means with batches of
/// `10 N_W` steps, pooled over the `K` orbits.
pub fn stationary_gradient<M: Model + ?Sized>(
    model: &M,
    config: &EstimatorConfig,
    schedule: &Schedule,
) -> Result<GradientEstimate> {
    config.validate_ergodic()?;
    with_discrete!(model, config.dt, |m| stationary(m, config, schedule))
}

fn stationary<M: Model + ?Sized>(
    model: &M,
    config: &EstimatorConfig,
    schedule: &Schedule,
) -> Result<GradientEstimate> {
    let p = model.n_params();
    let m = model.dim();
    let h = model.time_step();
    let window = config.window_steps;
    let retained = config.retained_range();
    let n_ret = retained.len();
    let norm = 1.0 / (n_ret as f64 * h);
    let bl = batch_length(n_ret, window);

    let members = map_members(0..config.ensemble_size, |k| {
        let path = simulate_path(model, config, k)?;
        let (phi_avg, phi_avg_se) =
            time_average(path.observable_trace(), config.burn_in_steps(), window);
        let windows = WindowSums::new(path.observable_trace(), phi_avg, window);
        let mut acc = Accumulator::new(p, m);
        let mut batches = BatchMeans::new(p, retained.start, n_ret, bl);
        let r = backward_sweep(
            model,
            &path,
            schedule,
            |_| vec![0.0; m],
            ergodic_source(model, &windows),
            |s| {
                if retained.contains(&s.k) {
                    acc.add(model, s, |i, d, g| batches.add(s.k, i, (d + g) / h));
                }
                Ok(())
            },
            false,
        )?;
        Ok(MemberStationary {
            drift: acc.drift.iter().map(|d| d * norm).collect(),
            diffusion: acc.diffusion.iter().map(|d| d * norm).collect(),
            batch_means: (0..p).map(|i| batches.means(i)).collect(),
            phi_avg,
            phi_avg_se,
            stats: r.stats,
        })
    })?;

    let k = members.len() as f64;
    let mut terms = TermBreakdown::zeros(p);
    let mut values = Vec::with_capacity(p);
    let mut std_errors = Vec::with_capacity(p);
    let mut n_samples = 0;
    for i in 0..p {
        terms.drift_term[i] = members.iter().map(|mm| mm.drift[i]).sum::<f64>() / k;
        terms.diffusion_term[i] = members.iter().map(|mm| mm.diffusion[i]).sum::<f64>() / k;
        values.push(terms.total(i));
        let pooled: Vec<f64> = members
            .iter()
            .flat_map(|mm| mm.batch_means[i].iter().copied())
            .collect();
        n_samples = pooled.len();
        std_errors.push(mean_and_stderr(&pooled).1);
    }
    Ok(GradientEstimate {
        values,
        std_errors,
        n_samples,
        phi_avg: members.iter().map(|mm| mm.phi_avg).sum::<f64>() / k,
        phi_avg_se: members.iter().map(|mm| mm.phi_avg_se.powi(2)).sum::<f64>().sqrt() / k,
        diagnostics: Some(terms),
        covector: Some(merge_stats(members.iter().map(|mm| &mm.stats))),
        config: config.clone(),
    })
}

/// Which summation identity [`pathwise_equivalence_check`] compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityForm {
    /// `grad Phi(x_N) . v_N + (Phi(x_N) - Phi_avg) sum a_n (b_n . v_n)/sigma_n`
    /// against `nu_0 . v_0 + sum nu_{k+1} . p_{k+1}`.
    FiniteTime,
    /// `sum_{n<N} v_n . xi_n` against `nu_0 . v_0 + sum nu_{k+1} . p_{k+1}`
    /// with the ergodic sources and the given window.
    Ergodic { window_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equivalence {
    pub tangent_value: f64,
    pub adjoint_value: f64,
    pub abs_diff: f64,
}

/// Evaluates the same per-path quantity through the tangent and through the
/// adjoint sweep. The two agree up to round-off on every path.
pub fn pathwise_equivalence_check<M: Model + ?Sized>(
    model: &M,
    path: &Path,
    schedule: &Schedule,
    param_index: usize,
    phi_avg: f64,
    form: IdentityForm,
) -> Result<Equivalence> {
    ensure_discrete(model)?;
    let m = model.dim();
    let mut v0 = vec![0.0; m];
    model.initial_tangent(param_index, &mut v0);
    let single_param = |s: &AdjointStep<'_>, buf: &mut Vec<f64>| -> f64 {
        model.param_drift_deriv(param_index, s.x, buf);
        dot(buf, s.nu_next) + model.param_diffusion_deriv(param_index, s.x) * dot(s.b, s.nu_next)
    };
    let mut buf = vec![0.0; m];
    let mut adjoint_sum = 0.0;

    let (tangent_value, nu0) = match form {
        IdentityForm::FiniteTime => {
            let tangent = finite_terms(model, path, schedule, param_index)?.value(phi_avg);
            let r = backward_sweep(
                model,
                path,
                schedule,
                finite_terminal(model),
                finite_source(path.terminal_observable(), phi_avg),
                |s| {
                    adjoint_sum += single_param(s, &mut buf);
                    Ok(())
                },
                false,
            )?;
            (tangent, r.nu0)
        }
        IdentityForm::Ergodic { window_steps } => {
            let windows = WindowSums::new(path.observable_trace(), phi_avg, window_steps);
            let h = model.time_step();
            let mut grad_phi = vec![0.0; m];
            let mut tangent = 0.0;
            propagate(model, path, schedule, param_index, |s| {
                model.observable_gradient(s.x, &mut grad_phi);
                tangent += h * dot(&grad_phi, s.v)
                    + h * s.alpha / s.sigma * windows.get(s.n) * dot(s.b, s.v);
            })?;
            let r = backward_sweep(
                model,
                path,
                schedule,
                |_| vec![0.0; m],
                ergodic_source(model, &windows),
                |s| {
                    adjoint_sum += single_param(s, &mut buf);
                    Ok(())
                },
                false,
            )?;
            (tangent, r.nu0)
        }
    };
    let adjoint_value = dot(&nu0, &v0) + adjoint_sum;
    Ok(Equivalence {
        tangent_value,
        adjoint_value,
        abs_diff: (tangent_value - adjoint_value).abs(),
    })
}
