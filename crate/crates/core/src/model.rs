//! The parameterized system that every estimator consumes.
//!
//! A [`Model`] is either a discrete random map
//! `x_{n+1} = f(x_n) + sigma(x_n) b_n` or an Ito SDE `dx = F(x) dt + sigma(x) dB`
//! with a scalar diffusion coefficient. Models carry their own state
//! Jacobians and per-parameter derivatives; nothing is differentiated
//! automatically. Use [`crate::validate_model`] to check the derivatives
//! against finite differences.
//!
//! SDE models are turned into discrete maps by [`discretize_sde`] (Euler
//! scheme). All sweeps operate on discrete maps only.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeKind {
    DiscreteMap,
    ContinuousSde,
}

/// A parameterized random dynamical system with scalar diffusion.
///
/// Vector-valued methods write into `out`, which always has length
/// [`Model::dim`] (or `dim * dim` for the dense Jacobian, row-major).
/// Implementations must be pure.
pub trait Model: Send + Sync {
    fn dim(&self) -> usize;

    fn n_params(&self) -> usize;

    fn time_kind(&self) -> TimeKind;

    /// `f(x)` for maps, `F(x)` for SDEs.
    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// Dense row-major Jacobian of the drift, `out[i * dim + j] = d drift_i / d x_j`.
    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]);

    /// `out = (grad drift)(x) v`. Override when the Jacobian is sparse.
    fn jacobian_vec(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let mut jac = vec![0.0; m * m];
        self.drift_jacobian(x, &mut jac);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&jac[i * m..(i + 1) * m], v);
        }
    }

    /// `out = (grad drift)(x)^T w`. Override when the Jacobian is sparse.
    fn jacobian_transpose_vec(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let mut jac = vec![0.0; m * m];
        self.drift_jacobian(x, &mut jac);
        out.fill(0.0);
        for (i, wi) in w.iter().enumerate() {
            for (o, j) in out.iter_mut().zip(&jac[i * m..(i + 1) * m]) {
                *o += j * wi;
            }
        }
    }

    /// Scalar diffusion coefficient; the noise enters as `sigma(x) * I`.
    fn diffusion(&self, x: &[f64]) -> f64;

    fn diffusion_gradient(&self, x: &[f64], out: &mut [f64]);

    /// Derivative of the drift with respect to parameter `param`.
    fn param_drift_deriv(&self, param: usize, x: &[f64], out: &mut [f64]);

    /// Derivative of the diffusion coefficient with respect to parameter `param`.
    fn param_diffusion_deriv(&self, param: usize, x: &[f64]) -> f64;

    fn observable(&self, x: &[f64]) -> f64;

    fn observable_gradient(&self, x: &[f64], out: &mut [f64]);

    fn initial_state(&self) -> &[f64];

    /// Derivative of the initial state with respect to parameter `param`.
    /// Zero unless the model says otherwise.
    fn initial_tangent(&self, _param: usize, out: &mut [f64]) {
        out.fill(0.0);
    }

    /// Length of one step in time units: 1 for raw maps, `dt` for Euler
    /// discretizations. Schedules are multiplied by it inside the sweeps.
    fn time_step(&self) -> f64 {
        1.0
    }

    /// Rough top Lyapunov exponent per time unit, if known.
    fn lyapunov_hint(&self) -> Option<f64> {
        None
    }
}

macro_rules! delegate_model {
    ($($ty:ty),*) => {$(
        impl<T: Model + ?Sized> Model for $ty {
            fn dim(&self) -> usize { (**self).dim() }
            fn n_params(&self) -> usize { (**self).n_params() }
            fn time_kind(&self) -> TimeKind { (**self).time_kind() }
            fn drift(&self, x: &[f64], out: &mut [f64]) { (**self).drift(x, out) }
            fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) { (**self).drift_jacobian(x, out) }
            fn jacobian_vec(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
                (**self).jacobian_vec(x, v, out)
            }
            fn jacobian_transpose_vec(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
                (**self).jacobian_transpose_vec(x, w, out)
            }
            fn diffusion(&self, x: &[f64]) -> f64 { (**self).diffusion(x) }
            fn diffusion_gradient(&self, x: &[f64], out: &mut [f64]) {
                (**self).diffusion_gradient(x, out)
            }
            fn param_drift_deriv(&self, param: usize, x: &[f64], out: &mut [f64]) {
                (**self).param_drift_deriv(param, x, out)
            }
            fn param_diffusion_deriv(&self, param: usize, x: &[f64]) -> f64 {
                (**self).param_diffusion_deriv(param, x)
            }
            fn observable(&self, x: &[f64]) -> f64 { (**self).observable(x) }
            fn observable_gradient(&self, x: &[f64], out: &mut [f64]) {
                (**self).observable_gradient(x, out)
            }
            fn initial_state(&self) -> &[f64] { (**self).initial_state() }
            fn initial_tangent(&self, param: usize, out: &mut [f64]) {
                (**self).initial_tangent(param, out)
            }
            fn time_step(&self) -> f64 { (**self).time_step() }
            fn lyapunov_hint(&self) -> Option<f64> { (**self).lyapunov_hint() }
        }
    )*};
}

delegate_model!(&T, Box<T>, Arc<T>);

/// A family of models indexed by a real parameter vector `gamma`, used by
/// finite-difference oracles, sweeps and descent.
///
/// The derivatives reported by `instantiate(g)` for parameter `i` must be
/// derivatives with respect to `g[i]`.
pub trait ModelFamily: Send + Sync {
    fn param_names(&self) -> Vec<String>;

    /// The parameter vector this family is centred on.
    fn params(&self) -> Vec<f64>;

    fn instantiate(&self, params: &[f64]) -> Result<Box<dyn Model>>;
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub(crate) fn ensure_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn ensure_discrete<M: Model + ?Sized>(model: &M) -> Result<()> {
    if model.time_kind() != TimeKind::DiscreteMap {
        return Err(Error::InvalidModel(
            "expected a discrete map; discretize SDE models with discretize_sde first".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Euler discretization

/// Euler-Maruyama discretization of an SDE model as a discrete map.
///
/// With step `dt` the map is `f(x) = x + F(x) dt` with diffusion
/// `sigma(x) sqrt(dt)`, driven by standard normals `b_n = dB_n / sqrt(dt)`.
/// Parameter derivatives scale the same way: `df = dF dt`,
/// `dsigma' = dsigma sqrt(dt)`. Schedules are not rescaled here: the sweeps
/// multiply `alpha` by [`Model::time_step`], which this type reports as `dt`.
#[derive(Debug, Clone)]
pub struct Discretized<M> {
    inner: M,
    dt: f64,
    sqrt_dt: f64,
}

/// Reduces a continuous SDE model to its Euler map with step `dt`.
pub fn discretize_sde<M: Model>(model: M, dt: f64) -> Result<Discretized<M>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidConfig(format!("time step must be positive, got {dt}")));
    }
    if model.time_kind() != TimeKind::ContinuousSde {
        return Err(Error::InvalidModel(
            "discretize_sde expects a continuous-time SDE model".into(),
        ));
    }
    Ok(Discretized {
        inner: model,
        dt,
        sqrt_dt: dt.sqrt(),
    })
}

impl<M> Discretized<M> {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: Model> Model for Discretized<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn time_kind(&self) -> TimeKind {
        TimeKind::DiscreteMap
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.inner.drift(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi + *o * self.dt;
        }
    }

    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
        let m = self.dim();
        self.inner.drift_jacobian(x, out);
        for (k, o) in out.iter_mut().enumerate() {
            *o *= self.dt;
            if k / m == k % m {
                *o += 1.0;
            }
        }
    }

    fn jacobian_vec(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.inner.jacobian_vec(x, v, out);
        for (o, vi) in out.iter_mut().zip(v) {
            *o = vi + *o * self.dt;
        }
    }

    fn jacobian_transpose_vec(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        self.inner.jacobian_transpose_vec(x, w, out);
        for (o, wi) in out.iter_mut().zip(w) {
            *o = wi + *o * self.dt;
        }
    }

    fn diffusion(&self, x: &[f64]) -> f64 {
        self.inner.diffusion(x) * self.sqrt_dt
    }

    fn diffusion_gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner.diffusion_gradient(x, out);
        out.iter_mut().for_each(|o| *o *= self.sqrt_dt);
    }

    fn param_drift_deriv(&self, param: usize, x: &[f64], out: &mut [f64]) {
        self.inner.param_drift_deriv(param, x, out);
        out.iter_mut().for_each(|o| *o *= self.dt);
    }

    fn param_diffusion_deriv(&self, param: usize, x: &[f64]) -> f64 {
        self.inner.param_diffusion_deriv(param, x) * self.sqrt_dt
    }

    fn observable(&self, x: &[f64]) -> f64 {
        self.inner.observable(x)
    }

    fn observable_gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner.observable_gradient(x, out)
    }

    fn initial_state(&self) -> &[f64] {
        self.inner.initial_state()
    }

    fn initial_tangent(&self, param: usize, out: &mut [f64]) {
        self.inner.initial_tangent(param, out)
    }

    fn time_step(&self) -> f64 {
        self.dt
    }

    fn lyapunov_hint(&self) -> Option<f64> {
        self.inner.lyapunov_hint()
    }
}

/// Runs `$body` with `$m` bound to a discrete map: the model itself, or its
/// Euler discretization with step `$dt` when it is an SDE.
macro_rules! with_discrete {
    ($model:expr, $dt:expr, |$m:ident| $body:expr) => {
        match $crate::model::Model::time_kind($model) {
            $crate::model::TimeKind::DiscreteMap => {
                let $m = $model;
                $body
            }
            $crate::model::TimeKind::ContinuousSde => {
                let discrete = $crate::model::discretize_sde($model, $dt)?;
                let $m = &discrete;
                $body
            }
        }
    };
}
pub(crate) use with_discrete;

// ---------------------------------------------------------------------------
// Closure-backed models

pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A model assembled from closures; the entry point for user-defined systems.
#[derive(Clone)]
pub struct ModelSpec {
    pub dim: usize,
    pub time_kind: TimeKind,
    pub drift: VectorField,
    /// Writes the dense row-major `dim x dim` Jacobian.
    pub drift_jacobian: VectorField,
    pub diffusion: ScalarField,
    pub diffusion_gradient: VectorField,
    pub param_drift_derivs: Vec<VectorField>,
    pub param_diffusion_derivs: Vec<ScalarField>,
    pub observable: ScalarField,
    pub observable_gradient: VectorField,
    pub x0: Vec<f64>,
    /// Per-parameter initial tangent; empty means all zero.
    pub v0: Vec<Vec<f64>>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim", &self.dim)
            .field("n_params", &self.param_drift_derivs.len())
            .field("time_kind", &self.time_kind)
            .field("x0", &self.x0)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    pub fn builder(dim: usize, time_kind: TimeKind) -> ModelSpecBuilder {
        ModelSpecBuilder {
            dim,
            time_kind,
            drift: None,
            drift_jacobian: None,
            diffusion: None,
            diffusion_gradient: None,
            params: Vec::new(),
            observable: None,
            observable_gradient: None,
            x0: None,
            v0: Vec::new(),
        }
    }
}

pub struct ModelSpecBuilder {
    dim: usize,
    time_kind: TimeKind,
    drift: Option<VectorField>,
    drift_jacobian: Option<VectorField>,
    diffusion: Option<ScalarField>,
    diffusion_gradient: Option<VectorField>,
    params: Vec<(VectorField, ScalarField)>,
    observable: Option<ScalarField>,
    observable_gradient: Option<VectorField>,
    x0: Option<Vec<f64>>,
    v0: Vec<Vec<f64>>,
}

impl ModelSpecBuilder {
    pub fn drift(
        mut self,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        jacobian: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift = Some(Arc::new(f));
        self.drift_jacobian = Some(Arc::new(jacobian));
        self
    }

    pub fn diffusion(
        mut self,
        sigma: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.diffusion = Some(Arc::new(sigma));
        self.diffusion_gradient = Some(Arc::new(gradient));
        self
    }

    /// Constant diffusion coefficient with zero gradient.
    pub fn constant_diffusion(self, sigma: f64) -> Self {
        self.diffusion(move |_| sigma, |_, out| out.fill(0.0))
    }

    /// Adds one parameter given its drift and diffusion derivatives.
    pub fn param(
        mut self,
        drift_deriv: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion_deriv: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.params
            .push((Arc::new(drift_deriv), Arc::new(diffusion_deriv)));
        self
    }

    pub fn observable(
        mut self,
        phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.observable = Some(Arc::new(phi));
        self.observable_gradient = Some(Arc::new(gradient));
        self
    }

    pub fn x0(mut self, x0: Vec<f64>) -> Self {
        self.x0 = Some(x0);
        self
    }

    /// Per-parameter initial tangents, one vector per parameter.
    pub fn v0(mut self, v0: Vec<Vec<f64>>) -> Self {
        self.v0 = v0;
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let missing = |what: &str| Error::InvalidModel(format!("model spec is missing {what}"));
        if self.dim == 0 {
            return Err(Error::InvalidModel("state dimension must be positive".into()));
        }
        if self.params.is_empty() {
            return Err(Error::InvalidModel("model needs at least one parameter".into()));
        }
        let x0 = self.x0.ok_or_else(|| missing("x0"))?;
        ensure_dim("x0", self.dim, x0.len())?;
        if !self.v0.is_empty() {
            ensure_dim("v0 parameter count", self.params.len(), self.v0.len())?;
            for v in &self.v0 {
                ensure_dim("v0", self.dim, v.len())?;
            }
        }
        let (param_drift_derivs, param_diffusion_derivs) = self.params.into_iter().unzip();
        Ok(ModelSpec {
            dim: self.dim,
            time_kind: self.time_kind,
            drift: self.drift.ok_or_else(|| missing("drift"))?,
            drift_jacobian: self.drift_jacobian.ok_or_else(|| missing("drift Jacobian"))?,
            diffusion: self.diffusion.ok_or_else(|| missing("diffusion"))?,
            diffusion_gradient: self
                .diffusion_gradient
                .ok_or_else(|| missing("diffusion gradient"))?,
            param_drift_derivs,
            param_diffusion_derivs,
            observable: self.observable.ok_or_else(|| missing("observable"))?,
            observable_gradient: self
                .observable_gradient
                .ok_or_else(|| missing("observable gradient"))?,
            x0,
            v0: self.v0,
        })
    }
}

impl Model for ModelSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_params(&self) -> usize {
        self.param_drift_derivs.len()
    }

    fn time_kind(&self) -> TimeKind {
        self.time_kind
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
        (self.drift_jacobian)(x, out)
    }

    fn diffusion(&self, x: &[f64]) -> f64 {
        (self.diffusion)(x)
    }

    fn diffusion_gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion_gradient)(x, out)
    }

    fn param_drift_deriv(&self, param: usize, x: &[f64], out: &mut [f64]) {
        (self.param_drift_derivs[param])(x, out)
    }

    fn param_diffusion_deriv(&self, param: usize, x: &[f64]) -> f64 {
        (self.param_diffusion_derivs[param])(x)
    }

    fn observable(&self, x: &[f64]) -> f64 {
        (self.observable)(x)
    }

    fn observable_gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.observable_gradient)(x, out)
    }

    fn initial_state(&self) -> &[f64] {
        &self.x0
    }

    fn initial_tangent(&self, param: usize, out: &mut [f64]) {
        match self.v0.get(param) {
            Some(v) => out.copy_from_slice(v),
            None => out.fill(0.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter aliasing

/// Exposes `map.len()` parameters, parameter `i` being an alias of the
/// inner model's parameter `map[i]`. Handy for cost-scaling experiments.
#[derive(Debug, Clone)]
pub struct ParamAlias<M> {
    inner: M,
    map: Vec<usize>,
}

impl<M: Model> ParamAlias<M> {
    pub fn new(inner: M, map: Vec<usize>) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::InvalidModel("parameter map is empty".into()));
        }
        if let Some(&bad) = map.iter().find(|&&p| p >= inner.n_params()) {
            return Err(Error::OutOfRange {
                index: bad,
                len: inner.n_params(),
            });
        }
        Ok(Self { inner, map })
    }

    /// Repeats the inner parameters cyclically until there are `count` of them.
    pub fn cycled(inner: M, count: usize) -> Result<Self> {
        let p = inner.n_params();
        Self::new(inner, (0..count).map(|i| i % p).collect())
    }
}

impl<M: Model> Model for ParamAlias<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn n_params(&self) -> usize {
        self.map.len()
    }
    fn time_kind(&self) -> TimeKind {
        self.inner.time_kind()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.inner.drift(x, out)
    }
    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
        self.inner.drift_jacobian(x, out)
    }
    fn jacobian_vec(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.inner.jacobian_vec(x, v, out)
    }
    fn jacobian_transpose_vec(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        self.inner.jacobian_transpose_vec(x, w, out)
    }
    fn diffusion(&self, x: &[f64]) -> f64 {
        self.inner.diffusion(x)
    }
    fn diffusion_gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner.diffusion_gradient(x, out)
    }
    fn param_drift_deriv(&self, param: usize, x: &[f64], out: &mut [f64]) {
        self.inner.param_drift_deriv(self.map[param], x, out)
    }
    fn param_diffusion_deriv(&self, param: usize, x: &[f64]) -> f64 {
        self.inner.param_diffusion_deriv(self.map[param], x)
    }
    fn observable(&self, x: &[f64]) -> f64 {
        self.inner.observable(x)
    }
    fn observable_gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner.observable_gradient(x, out)
    }
    fn initial_state(&self) -> &[f64] {
        self.inner.initial_state()
    }
    fn initial_tangent(&self, param: usize, out: &mut [f64]) {
        self.inner.initial_tangent(self.map[param], out)
    }
    fn time_step(&self) -> f64 {
        self.inner.time_step()
    }
    fn lyapunov_hint(&self) -> Option<f64> {
        self.inner.lyapunov_hint()
    }
}
