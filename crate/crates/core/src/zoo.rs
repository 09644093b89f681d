//! Ready-made models: the stochastic Lorenz 96 system and two solvable
//! validation systems.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Model, ModelFamily, TimeKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz96Params {
    pub gamma0: f64,
    pub gamma1: f64,
    pub m: usize,
}

impl Default for Lorenz96Params {
    fn default() -> Self {
        Self {
            gamma0: 8.0,
            gamma1: 2.0,
            m: 40,
        }
    }
}

/// `dx^i = ((x^{i+1} - x^{i-2}) x^{i-1} - x^i + gamma0 - 0.01 (x^i)^2) dt
///        + (gamma1 + exp(-|x|^2/2)) dB^i`, cyclic in `i`, with `Phi = |x|^2 / M`.
///
/// Parameter 0 is `gamma0` (forcing), parameter 1 is `gamma1` (noise floor).
#[derive(Debug, Clone)]
pub struct Lorenz96 {
    params: Lorenz96Params,
    x0: Vec<f64>,
    v0: [Vec<f64>; 2],
}

/// Rough top Lyapunov exponent near the standard forcing.
const LORENZ96_LYAPUNOV: f64 = 1.7;

pub fn lorenz96(params: Lorenz96Params) -> Result<Lorenz96> {
    if params.m < 4 {
        return Err(Error::InvalidModel(format!(
            "Lorenz 96 needs at least 4 components, got {}",
            params.m
        )));
    }
    if !params.gamma0.is_finite() || !params.gamma1.is_finite() {
        return Err(Error::InvalidModel("Lorenz 96 parameters must be finite".into()));
    }
    Ok(Lorenz96 {
        params,
        x0: vec![1.0; params.m],
        v0: [vec![0.0; params.m], vec![0.0; params.m]],
    })
}

impl Lorenz96 {
    pub fn params(&self) -> Lorenz96Params {
        self.params
    }

    pub fn with_x0(mut self, x0: Vec<f64>) -> Result<Self> {
        if x0.len() != self.params.m {
            return Err(Error::DimensionMismatch {
                what: "x0",
                expected: self.params.m,
                got: x0.len(),
            });
        }
        self.x0 = x0;
        Ok(self)
    }

    pub fn with_initial_tangent(mut self, param: usize, v0: Vec<f64>) -> Result<Self> {
        if param > 1 {
            return Err(Error::OutOfRange { index: param, len: 2 });
        }
        if v0.len() != self.params.m {
            return Err(Error::DimensionMismatch {
                what: "v0",
                expected: self.params.m,
                got: v0.len(),
            });
        }
        self.v0[param] = v0;
        Ok(self)
    }

    fn bump(x: &[f64]) -> f64 {
        (-0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp()
    }
}

impl Model for Lorenz96 {
    fn dim(&self) -> usize {
        self.params.m
    }

    fn n_params(&self) -> usize {
        2
    }

    fn time_kind(&self) -> TimeKind {
        TimeKind::ContinuousSde
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let m = self.params.m;
        for i in 0..m {
            let xp1 = x[(i + 1) % m];
            let xm1 = x[(i + m - 1) % m];
            let xm2 = x[(i + m - 2) % m];
            out[i] = (xp1 - xm2) * xm1 - x[i] + self.params.gamma0 - 0.01 * x[i] * x[i];
        }
    }

    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
        let m = self.params.m;
        out.fill(0.0);
        for i in 0..m {
            let (ip1, im1, im2) = ((i + 1) % m, (i + m - 1) % m, (i + m - 2) % m);
            let row = &mut out[i * m..(i + 1) * m];
            row[ip1] += x[im1];
            row[im2] -= x[im1];
            row[im1] += x[ip1] - x[im2];
            row[i] += -1.0 - 0.02 * x[i];
        }
    }

    fn jacobian_vec(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let m = self.params.m;
        for i in 0..m {
            let (ip1, im1, im2) = ((i + 1) % m, (i + m - 1) % m, (i + m - 2) % m);
            out[i] = x[im1] * (v[ip1] - v[im2]) + (x[ip1] - x[im2]) * v[im1]
                - (1.0 + 0.02 * x[i]) * v[i];
        }
    }

    fn jacobian_transpose_vec(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let m = self.params.m;
        for j in 0..m {
            let (jp1, jp2, jm1, jm2) = ((j + 1) % m, (j + 2) % m, (j + m - 1) % m, (j + m - 2) % m);
            out[j] = x[jm2] * w[jm1] - x[jp1] * w[jp2] + (x[jp2] - x[jm1]) * w[jp1]
                - (1.0 + 0.02 * x[j]) * w[j];
        }
    }

    fn diffusion(&self, x: &[f64]) -> f64 {
        self.params.gamma1 + Self::bump(x)
    }

    fn diffusion_gradient(&self, x: &[f64], out: &mut [f64]) {
        let e = Self::bump(x);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -e * xi;
        }
    }

    fn param_drift_deriv(&self, param: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(if param == 0 { 1.0 } else { 0.0 });
    }

    fn param_diffusion_deriv(&self, param: usize, _x: &[f64]) -> f64 {
        if param == 1 {
            1.0
        } else {
            0.0
        }
    }

    fn observable(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() / self.params.m as f64
    }

    fn observable_gradient(&self, x: &[f64], out: &mut [f64]) {
        let c = 2.0 / self.params.m as f64;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = c * xi;
        }
    }

    fn initial_state(&self) -> &[f64] {
        &self.x0
    }

    fn initial_tangent(&self, param: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.v0[param]);
    }

    fn lyapunov_hint(&self) -> Option<f64> {
        Some(LORENZ96_LYAPUNOV)
    }
}

impl ModelFamily for Lorenz96 {
    fn param_names(&self) -> Vec<String> {
        vec!["gamma0".into(), "gamma1".into()]
    }

    fn params(&self) -> Vec<f64> {
        vec![self.params.gamma0, self.params.gamma1]
    }

    fn instantiate(&self, params: &[f64]) -> Result<Box<dyn Model>> {
        check_len(params, 2)?;
        let mut next = self.clone();
        next.params.gamma0 = params[0];
        next.params.gamma1 = params[1];
        lorenz96(next.params)?;
        Ok(Box::new(next))
    }
}

fn check_len(params: &[f64], n: usize) -> Result<()> {
    if params.len() != n {
        return Err(Error::DimensionMismatch {
            what: "parameter vector",
            expected: n,
            got: params.len(),
        });
    }
    Ok(())
}

/// `dx = -theta x dt + sigma dB`, `Phi = x^2`. Parameter 0 shifts `theta`,
/// parameter 1 shifts `sigma`.
#[derive(Debug, Clone)]
pub struct Ou {
    theta: f64,
    sigma: f64,
    x0: [f64; 1],
}

pub fn ou(theta: f64, sigma: f64) -> Result<Ou> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::InvalidModel(format!("OU needs theta > 0, got {theta}")));
    }
    if !sigma.is_finite() {
        return Err(Error::InvalidModel("OU sigma must be finite".into()));
    }
    Ok(Ou {
        theta,
        sigma,
        x0: [0.0],
    })
}

impl Ou {
    pub fn with_x0(mut self, x0: f64) -> Self {
        self.x0 = [x0];
        self
    }
}

impl Model for Ou {
    fn dim(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        2
    }
    fn time_kind(&self) -> TimeKind {
        TimeKind::ContinuousSde
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -self.theta * x[0];
    }
    fn drift_jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = -self.theta;
    }
    fn diffusion(&self, _x: &[f64]) -> f64 {
        self.sigma
    }
    fn diffusion_gradient(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn param_drift_deriv(&self, param: usize, x: &[f64], out: &mut [f64]) {
        out[0] = if param == 0 { -x[0] } else { 0.0 };
    }
    fn param_diffusion_deriv(&self, param: usize, _x: &[f64]) -> f64 {
        if param == 1 {
            1.0
        } else {
            0.0
        }
    }
    fn observable(&self, x: &[f64]) -> f64 {
        x[0] * x[0]
    }
    fn observable_gradient(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 2.0 * x[0];
    }
    fn initial_state(&self) -> &[f64] {
        &self.x0
    }
    fn lyapunov_hint(&self) -> Option<f64> {
        Some(-self.theta)
    }
}

impl ModelFamily for Ou {
    fn param_names(&self) -> Vec<String> {
        vec!["theta".into(), "sigma".into()]
    }
    fn params(&self) -> Vec<f64> {
        vec![self.theta, self.sigma]
    }
    fn instantiate(&self, params: &[f64]) -> Result<Box<dyn Model>> {
        check_len(params, 2)?;
        Ok(Box::new(ou(params[0], params[1])?.with_x0(self.x0[0])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffineObservable {
    X,
    XSquared,
}

/// `x_{n+1} = a x_n + gamma + sigma b_n` from `x_0 = 0`. Parameter 0 is
/// `gamma`, parameter 1 is `sigma`.
#[derive(Debug, Clone)]
pub struct Affine1d {
    a: f64,
    gamma: f64,
    sigma: f64,
    observable: AffineObservable,
    x0: [f64; 1],
}

pub fn affine1d(a: f64, gamma: f64, sigma: f64) -> Affine1d {
    Affine1d {
        a,
        gamma,
        sigma,
        observable: AffineObservable::X,
        x0: [0.0],
    }
}

impl Affine1d {
    pub fn with_observable(mut self, observable: AffineObservable) -> Self {
        self.observable = observable;
        self
    }
}

impl Model for Affine1d {
    fn dim(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        2
    }
    fn time_kind(&self) -> TimeKind {
        TimeKind::DiscreteMap
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.a * x[0] + self.gamma;
    }
    fn drift_jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.a;
    }
    fn diffusion(&self, _x: &[f64]) -> f64 {
        self.sigma
    }
    fn diffusion_gradient(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn param_drift_deriv(&self, param: usize, _x: &[f64], out: &mut [f64]) {
        out[0] = if param == 0 { 1.0 } else { 0.0 };
    }
    fn param_diffusion_deriv(&self, param: usize, _x: &[f64]) -> f64 {
        if param == 1 {
            1.0
        } else {
            0.0
        }
    }
    fn observable(&self, x: &[f64]) -> f64 {
        match self.observable {
            AffineObservable::X => x[0],
            AffineObservable::XSquared => x[0] * x[0],
        }
    }
    fn observable_gradient(&self, x: &[f64], out: &mut [f64]) {
        out[0] = match self.observable {
            AffineObservable::X => 1.0,
            AffineObservable::XSquared => 2.0 * x[0],
        };
    }
    fn initial_state(&self) -> &[f64] {
        &self.x0
    }
    fn lyapunov_hint(&self) -> Option<f64> {
        Some(self.a.abs().ln())
    }
}

impl ModelFamily for Affine1d {
    fn param_names(&self) -> Vec<String> {
        vec!["gamma".into(), "sigma".into()]
    }
    fn params(&self) -> Vec<f64> {
        vec![self.gamma, self.sigma]
    }
    fn instantiate(&self, params: &[f64]) -> Result<Box<dyn Model>> {
        check_len(params, 2)?;
        Ok(Box::new(Affine1d {
            gamma: params[0],
            sigma: params[1],
            ..self.clone()
        }))
    }
}

pub const MODEL_NAMES: [&str; 3] = ["lorenz96", "ou", "affine1d"];

fn take(
    params: &mut BTreeMap<String, f64>,
    key: &str,
    default: Option<f64>,
    model: &str,
) -> Result<f64> {
    params.remove(key).or(default).ok_or_else(|| {
        Error::InvalidConfig(format!("model {model} needs parameter {key}"))
    })
}

/// Builds a registered model family from its name and numeric settings.
///
/// * `lorenz96`: `gamma0` (8), `gamma1` (2), `m` (40)
/// * `ou`: `theta` (1), `sigma` (0.5), `x0` (0)
/// * `affine1d`: `a`, `gamma` (0), `sigma` (1), `observable_power` (1 or 2)
pub fn lookup(name: &str, params: &BTreeMap<String, f64>) -> Result<Box<dyn ModelFamily>> {
    let mut p = params.clone();
    let family: Box<dyn ModelFamily> = match name {
        "lorenz96" => {
            let m = take(&mut p, "m", Some(40.0), name)?;
            if m.fract() != 0.0 || m < 0.0 {
                return Err(Error::InvalidConfig(format!("m must be a whole number, got {m}")));
            }
            Box::new(lorenz96(Lorenz96Params {
                gamma0: take(&mut p, "gamma0", Some(8.0), name)?,
                gamma1: take(&mut p, "gamma1", Some(2.0), name)?,
                m: m as usize,
            })?)
        }
        "ou" => {
            let theta = take(&mut p, "theta", Some(1.0), name)?;
            let sigma = take(&mut p, "sigma", Some(0.5), name)?;
            let x0 = take(&mut p, "x0", Some(0.0), name)?;
            Box::new(ou(theta, sigma)?.with_x0(x0))
        }
        "affine1d" => {
            let a = take(&mut p, "a", None, name)?;
            let gamma = take(&mut p, "gamma", Some(0.0), name)?;
            let sigma = take(&mut p, "sigma", Some(1.0), name)?;
            let observable = match take(&mut p, "observable_power", Some(1.0), name)? {
                1.0 => AffineObservable::X,
                2.0 => AffineObservable::XSquared,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "observable_power must be 1 or 2, got {other}"
                    )))
                }
            };
            Box::new(affine1d(a, gamma, sigma).with_observable(observable))
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown model {other:?}; known models: {}",
                MODEL_NAMES.join(", ")
            )))
        }
    };
    if let Some(key) = p.keys().next() {
        return Err(Error::InvalidConfig(format!(
            "unknown parameter {key:?} for model {name}"
        )));
    }
    Ok(family)
}
