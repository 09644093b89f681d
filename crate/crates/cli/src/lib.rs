//! Experiment runner behind the `pathkernel` binary.
//!
//! A run is described by one TOML file (or a bundled profile) plus dotted
//! `key=value` overrides. Every runner writes machine-readable output to a
//! writer and a short human summary to stderr.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pathkernel::zoo;
use pathkernel::{
    adjoint_finite_time_gradient, discretize_sde, simulate_path, stationary_gradient, steps_for,
    validate_model, write_path_csv, EstimatorConfig, GradientEstimate, Model, ModelFamily,
    PhiAvgMode, Schedule, StorageMode, TimeKind,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] pathkernel::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("{failed} of {total} sweep points failed")]
    PartialSweep { failed: usize, total: usize },
}

impl CliError {
    /// 0 success, 2 configuration, 3 forward blow-up or non-positive
    /// diffusion, 4 covector blow-up, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use pathkernel::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                E::InvalidConfig(_)
                | E::InvalidModel(_)
                | E::DimensionMismatch { .. }
                | E::OutOfRange { .. }
                | E::InvalidSchedule { .. }
                | E::OrbitTooShort(_) => 2,
                E::BlowUp { .. } | E::NonPositiveDiffusion { .. } => 3,
                E::CovectorBlowUp { .. } => 4,
                E::Io(_) => 1,
            },
            CliError::Io(_) | CliError::CheckFailed(_) | CliError::PartialSweep { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const PROFILES: [(&str, &str); 2] = [
    ("lorenz96-paper", include_str!("../profiles/lorenz96-paper.toml")),
    ("ou-check", include_str!("../profiles/ou-check.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    FiniteTime,
    #[default]
    Stationary,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "one")]
    pub dt: f64,
    /// Horizon `T` in time units.
    pub horizon: Option<f64>,
    /// Step count; takes precedence over `horizon`.
    pub n_steps: Option<usize>,
    /// Decorrelation window `W` in time units.
    #[serde(default)]
    pub window: f64,
    #[serde(default = "one_usize")]
    pub ensemble_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub alpha: f64,
    /// Defaults to on in stationary mode and off in finite-time mode.
    pub trim: Option<bool>,
    #[serde(default)]
    pub storage_mode: StorageMode,
    #[serde(default)]
    pub phi_avg: PhiAvgMode,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl EstimatorSection {
    pub fn to_config(&self, seed: u64) -> Result<EstimatorConfig> {
        let n_steps = match (self.n_steps, self.horizon) {
            (Some(n), _) => n,
            (None, Some(t)) => steps_for(t, self.dt),
            (None, None) => {
                return Err(CliError::Config(
                    "estimator needs either horizon or n_steps".into(),
                ))
            }
        };
        let cfg = EstimatorConfig {
            dt: self.dt,
            n_steps,
            window_steps: steps_for(self.window, self.dt),
            ensemble_size: self.ensemble_size,
            seed,
            trim: self.trim.unwrap_or(self.mode == Mode::Stationary),
            storage_mode: self.storage_mode,
            phi_avg: self.phi_avg,
        };
        match self.mode {
            Mode::FiniteTime => cfg.validate()?,
            Mode::Stationary => cfg.validate_ergodic()?,
        }
        Ok(cfg)
    }

    pub fn horizon_value(&self) -> f64 {
        match self.n_steps {
            Some(n) => n as f64 * self.dt,
            None => self.horizon.unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub path: Option<PathBuf>,
}

/// Grid axes keyed by parameter name.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct SweepSection {
    #[serde(flatten)]
    pub axes: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescentSection {
    pub iterations: usize,
    pub step: f64,
    #[serde(default)]
    pub direction: Direction,
    /// Stop once the gradient norm (over active parameters) drops below this.
    #[serde(default)]
    pub tol: f64,
    /// Rescale gradients whose norm exceeds this.
    pub clip: Option<f64>,
    /// Parameter names to move; all by default.
    pub active: Option<Vec<String>>,
    #[serde(default)]
    pub lower: BTreeMap<String, f64>,
    #[serde(default)]
    pub upper: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub value: f64,
    pub rel_tol: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    #[serde(default = "default_probes")]
    pub n_probe: usize,
    #[serde(default = "default_check_tol")]
    pub tol: f64,
    /// Expected gradient components by parameter name.
    #[serde(default)]
    pub expect: BTreeMap<String, Expectation>,
}

fn default_probes() -> usize {
    16
}

fn default_check_tol() -> f64 {
    1e-6
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            n_probe: default_probes(),
            tol: default_check_tol(),
            expect: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub output: OutputSection,
    pub sweep: Option<SweepSection>,
    pub descent: Option<DescentSection>,
    #[serde(default)]
    pub check: CheckSection,
}

impl ExperimentConfig {
    pub fn family(&self) -> Result<Box<dyn ModelFamily>> {
        Ok(zoo::lookup(&self.model.name, &self.model.params)?)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Ok(Schedule::constant(self.estimator.alpha)?)
    }
}

pub fn profile(name: &str) -> Result<&'static str> {
    PROFILES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| {
            let known: Vec<&str> = PROFILES.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!(
                "unknown profile {name:?}; known profiles: {}",
                known.join(", ")
            ))
        })
}

fn parse_override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override {key:?}: {part} is not a table"))
        })?;
    }
    node.insert(
        parts[parts.len() - 1].to_string(),
        parse_override_value(raw.trim()),
    );
    Ok(())
}

/// Parses a TOML document and applies dotted `key=value` overrides.
pub fn load_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    if overrides.is_empty() {
        return toml::from_str(text).map_err(|e| CliError::Config(e.to_string()));
    }
    let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

/// JSON document written by `gradient`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub model: String,
    pub mode: Mode,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
    pub alpha: f64,
    #[serde(flatten)]
    pub estimate: GradientEstimate,
}

fn gradient_at(
    cfg: &ExperimentConfig,
    family: &dyn ModelFamily,
    params: &[f64],
    seed: u64,
) -> Result<GradientEstimate> {
    let model = family.instantiate(params)?;
    let est_cfg = cfg.estimator.to_config(seed)?;
    let schedule = cfg.schedule()?;
    Ok(match cfg.estimator.mode {
        Mode::FiniteTime => adjoint_finite_time_gradient(&*model, &est_cfg, &schedule)?,
        Mode::Stationary => stationary_gradient(&*model, &est_cfg, &schedule)?,
    })
}

pub fn run_gradient(cfg: &ExperimentConfig) -> Result<GradientReport> {
    let family = cfg.family()?;
    let params = family.params();
    let estimate = gradient_at(cfg, &*family, &params, cfg.estimator.seed)?;
    Ok(GradientReport {
        model: cfg.model.name.clone(),
        mode: cfg.estimator.mode,
        param_names: family.param_names(),
        params,
        alpha: cfg.estimator.alpha,
        estimate,
    })
}

pub fn write_json<T: Serialize, W: Write>(value: &T, out: &mut W) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)
        .map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    writeln!(out)?;
    Ok(())
}

pub fn gradient_summary(report: &GradientReport) -> String {
    let mut s = format!(
        "{} ({:?}, alpha = {}): Phi_avg = {:.6} +- {:.2e}\n",
        report.model, report.mode, report.alpha, report.estimate.phi_avg, report.estimate.phi_avg_se
    );
    for (i, name) in report.param_names.iter().enumerate() {
        s.push_str(&format!(
            "  dPhi/d{name} = {:.6} +- {:.2e}\n",
            report.estimate.values[i], report.estimate.std_errors[i]
        ));
    }
    if let Some(c) = &report.estimate.covector {
        s.push_str(&format!(
            "  covector max |nu| early/late = {:.3e} / {:.3e}\n",
            c.max_norm_early, c.max_norm_late
        ));
    }
    s
}

/// Compares a gradient against the `[check.expect]` table.
pub fn check_expectations(cfg: &ExperimentConfig, report: &GradientReport) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (name, exp) in &cfg.check.expect {
        let i = report
            .param_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CliError::Config(format!("check.expect names unknown parameter {name:?}")))?;
        let got = report.estimate.values[i];
        let rel = (got - exp.value).abs() / exp.value.abs().max(f64::MIN_POSITIVE);
        let ok = rel <= exp.rel_tol;
        let line = format!(
            "dPhi/d{name}: {got:.6} vs expected {} (rel err {:.2}%, limit {:.2}%) {}",
            exp.value,
            100.0 * rel,
            100.0 * exp.rel_tol,
            if ok { "ok" } else { "FAILED" }
        );
        if !ok {
            failures.push(line.clone());
        }
        lines.push(line);
    }
    if failures.is_empty() {
        Ok(lines)
    } else {
        Err(CliError::CheckFailed(failures.join("; ")))
    }
}

fn grid_points(
    axes: &BTreeMap<String, Vec<f64>>,
    names: &[String],
    base: &[f64],
) -> Result<Vec<Vec<f64>>> {
    for key in axes.keys() {
        if !names.contains(key) {
            return Err(CliError::Config(format!(
                "sweep axis {key:?} is not a model parameter ({})",
                names.join(", ")
            )));
        }
    }
    let mut points = vec![base.to_vec()];
    for (i, name) in names.iter().enumerate() {
        if let Some(values) = axes.get(name) {
            if values.is_empty() {
                return Err(CliError::Config(format!("sweep axis {name:?} is empty")));
            }
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q[i] = *v;
                        q
                    })
                })
                .collect();
        }
    }
    Ok(points)
}

fn csv_float(v: f64) -> String {
    format!("{v}")
}

/// One row per grid point with columns `<params>, phi_avg, phi_avg_se,
/// dphi_d<param>, dphi_d<param>_se, ..., T, W, alpha, seed, error`. Point
/// `i` uses seed `seed + i`; failed points have empty numeric cells and the
/// message in `error`. Returns the failures by point index.
pub fn run_sweep<W: Write>(cfg: &ExperimentConfig, out: &mut W) -> Result<Vec<(usize, CliError)>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep needs a [sweep] section".into()))?;
    let family = cfg.family()?;
    let names = family.param_names();
    let points = grid_points(&sweep.axes, &names, &family.params())?;
    let base_seed = cfg.estimator.seed;
    let results: Vec<Result<GradientEstimate>> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| gradient_at(cfg, &*family, p, base_seed.wrapping_add(i as u64)))
        .collect();

    let mut header: Vec<String> = names.clone();
    header.extend(["phi_avg".to_string(), "phi_avg_se".to_string()]);
    for n in &names {
        header.push(format!("dphi_d{n}"));
        header.push(format!("dphi_d{n}_se"));
    }
    header.extend(["T", "W", "alpha", "seed", "error"].map(String::from));
    writeln!(out, "{}", header.join(","))?;

    let mut failed = Vec::new();
    for (i, (p, r)) in points.iter().zip(results).enumerate() {
        let mut row: Vec<String> = p.iter().copied().map(csv_float).collect();
        match &r {
            Ok(est) => {
                row.push(csv_float(est.phi_avg));
                row.push(csv_float(est.phi_avg_se));
                for (v, se) in est.values.iter().zip(&est.std_errors) {
                    row.push(csv_float(*v));
                    row.push(csv_float(*se));
                }
            }
            Err(_) => row.extend(std::iter::repeat_n(String::new(), 2 + 2 * names.len())),
        }
        row.push(csv_float(cfg.estimator.horizon_value()));
        row.push(csv_float(cfg.estimator.window));
        row.push(csv_float(cfg.estimator.alpha));
        row.push(base_seed.wrapping_add(i as u64).to_string());
        match r {
            Ok(_) => row.push(String::new()),
            Err(e) => {
                row.push(format!("\"{}\"", e.to_string().replace('"', "'")));
                failed.push((i, e));
            }
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(failed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescentStatus {
    Converged,
    MaxIterations,
    LeftBox,
}

/// Fixed-step gradient iteration. Iterate `k` uses seed `seed + k`; every
/// iterate is logged as `iter, <params>, phi_avg, dphi_d<param>..., step`,
/// where `step` is the length of the move taken from that iterate (0 on
/// the last row). A move that leaves the `[lower, upper]` box is clamped,
/// the clamped point is evaluated and logged, and the iteration stops.
pub fn run_descent<W: Write>(cfg: &ExperimentConfig, out: &mut W) -> Result<DescentStatus> {
    let d = cfg
        .descent
        .as_ref()
        .ok_or_else(|| CliError::Config("descend needs a [descent] section".into()))?;
    if !(d.step > 0.0) {
        return Err(CliError::Config(format!("descent.step must be positive, got {}", d.step)));
    }
    let family = cfg.family()?;
    let names = family.param_names();
    let index = |n: &String| -> Result<usize> {
        names
            .iter()
            .position(|m| m == n)
            .ok_or_else(|| CliError::Config(format!("descent names unknown parameter {n:?}")))
    };
    let active: Vec<usize> = match &d.active {
        Some(list) => list.iter().map(index).collect::<Result<_>>()?,
        None => (0..names.len()).collect(),
    };
    let mut lower = vec![f64::NEG_INFINITY; names.len()];
    let mut upper = vec![f64::INFINITY; names.len()];
    for (n, v) in &d.lower {
        lower[index(n)?] = *v;
    }
    for (n, v) in &d.upper {
        upper[index(n)?] = *v;
    }
    let sign = match d.direction {
        Direction::Minimize => -1.0,
        Direction::Maximize => 1.0,
    };

    let mut header = vec!["iter".to_string()];
    header.extend(names.iter().cloned());
    header.push("phi_avg".into());
    header.extend(names.iter().map(|n| format!("dphi_d{n}")));
    header.push("step".into());
    writeln!(out, "{}", header.join(","))?;

    let log = |out: &mut W, k: usize, p: &[f64], est: &GradientEstimate, step: f64| -> Result<()> {
        let mut row = vec![k.to_string()];
        row.extend(p.iter().copied().map(csv_float));
        row.push(csv_float(est.phi_avg));
        row.extend(est.values.iter().copied().map(csv_float));
        row.push(csv_float(step));
        writeln!(out, "{}", row.join(","))?;
        Ok(())
    };

    let mut params = family.params();
    let mut k = 0;
    loop {
        let est = gradient_at(cfg, &*family, &params, cfg.estimator.seed.wrapping_add(k as u64))?;
        let mut g: Vec<f64> = vec![0.0; names.len()];
        for &i in &active {
            g[i] = est.values[i];
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= d.tol {
            log(out, k, &params, &est, 0.0)?;
            return Ok(DescentStatus::Converged);
        }
        if k >= d.iterations {
            log(out, k, &params, &est, 0.0)?;
            return Ok(DescentStatus::MaxIterations);
        }
        let scale = match d.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let mut next = params.clone();
        let mut left = false;
        for &i in &active {
            let v = params[i] + sign * d.step * scale * g[i];
            let clamped = v.clamp(lower[i], upper[i]);
            left |= clamped != v;
            next[i] = clamped;
        }
        let moved = next
            .iter()
            .zip(&params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        log(out, k, &params, &est, moved)?;
        params = next;
        k += 1;
        if left {
            let est = gradient_at(cfg, &*family, &params, cfg.estimator.seed.wrapping_add(k as u64))?;
            log(out, k, &params, &est, 0.0)?;
            return Ok(DescentStatus::LeftBox);
        }
    }
}

/// Writes member `member` of the configured ensemble as CSV.
pub fn run_simulate<W: Write>(
    cfg: &ExperimentConfig,
    member: usize,
    include_noise: bool,
    out: &mut W,
) -> Result<()> {
    let family = cfg.family()?;
    let model = family.instantiate(&family.params())?;
    let mut est_cfg = cfg.estimator.to_config(cfg.estimator.seed)?;
    est_cfg.storage_mode = StorageMode::FullInMemory;
    let dt = cfg.estimator.dt;
    match model.time_kind() {
        TimeKind::DiscreteMap => {
            let path = simulate_path(&*model, &est_cfg, member)?;
            write_path_csv(&*model, &path, dt, include_noise, out)?;
        }
        TimeKind::ContinuousSde => {
            let discrete = discretize_sde(&*model, dt)?;
            let path = simulate_path(&discrete, &est_cfg, member)?;
            write_path_csv(&discrete, &path, dt, include_noise, out)?;
        }
    }
    Ok(())
}

/// Derivative validation of the configured model, followed by the gradient
/// self-test when `[check.expect]` is present.
pub fn run_check(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let family = cfg.family()?;
    let model: Box<dyn Model> = family.instantiate(&family.params())?;
    let report = validate_model(
        &*model,
        Some(&*family),
        cfg.check.n_probe,
        cfg.check.tol,
        cfg.estimator.seed,
    )?;
    let mut lines: Vec<String> = report
        .checks
        .iter()
        .map(|c| format!("{}: max rel error {:.2e}", c.field, c.max_rel_error))
        .collect();
    let report = report.into_result()?;
    lines.push(format!("all {} derivative checks within {:.1e}", report.checks.len(), report.tolerance));
    if !cfg.check.expect.is_empty() {
        let g = run_gradient(cfg)?;
        lines.extend(check_expectations(cfg, &g)?);
    }
    Ok(lines)
}
