use crate::error::{Error, Result};
use crate::model::{Model, ModelFamily};
use crate::noise::NoiseStream;

/// Largest relative mismatch found for one hand-coded derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldCheck {
    pub field: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<FieldCheck>,
    pub tolerance: f64,
}

impl ValidationReport {
    pub fn failures(&self) -> Vec<&FieldCheck> {
        self.checks
            .iter()
            .filter(|c| !(c.max_rel_error <= self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// `Err(InvalidModel)` naming every failing field.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let names: Vec<String> = self
            .failures()
            .iter()
            .map(|c| format!("{} ({:.2e})", c.field, c.max_rel_error))
            .collect();
        Err(Error::InvalidModel(format!(
            "derivatives disagree with finite differences: {}",
            names.join(", ")
        )))
    }
}

const FD_STEP: f64 = 1e-6;

fn rel(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / (fd.abs() + 1.0)
}

#[derive(Default)]
struct Tracker(Vec<FieldCheck>);

impl Tracker {
    fn record(&mut self, field: &str, err: f64) {
        match self.0.iter_mut().find(|c| c.field == field) {
            Some(c) => {
                if !(err <= c.max_rel_error) {
                    c.max_rel_error = err;
                }
            }
            None => self.0.push(FieldCheck {
                field: field.to_string(),
                max_rel_error: err,
            }),
        }
    }
}

/// Compares a model's hand-coded derivatives with central finite
/// differences at `n_probe` random states around the initial state.
///
/// State derivatives (drift Jacobian and its products, diffusion and
/// observable gradients) are always checked. Parameter derivatives are
/// checked only when `family` is given, by differencing
/// `family.instantiate` around `family.params()`; `model` should then be
/// the family's model at those parameters.
pub fn validate_model(
    model: &dyn Model,
    family: Option<&dyn ModelFamily>,
    n_probe: usize,
    tol: f64,
    seed: u64,
) -> Result<ValidationReport> {
    let m = model.dim();
    let noise = NoiseStream::new(seed, 0, m);
    let x0 = model.initial_state().to_vec();
    let mut tr = Tracker::default();
    let mut x = vec![0.0; m];
    let mut jac = vec![0.0; m * m];
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    let mut grad = vec![0.0; m];
    let mut probe = vec![0.0; m];
    let mut out = vec![0.0; m];

    let neighbours = family
        .map(|fam| -> Result<Vec<(Box<dyn Model>, Box<dyn Model>, f64)>> {
            let g = fam.params();
            (0..g.len())
                .map(|i| {
                    let h = FD_STEP * (1.0 + g[i].abs());
                    let mut gp = g.clone();
                    let mut gm = g.clone();
                    gp[i] += h;
                    gm[i] -= h;
                    Ok((fam.instantiate(&gp)?, fam.instantiate(&gm)?, h))
                })
                .collect()
        })
        .transpose()?;

    for probe_ix in 0..n_probe {
        noise.fill(probe_ix, &mut x);
        for (xi, c) in x.iter_mut().zip(&x0) {
            *xi += c;
        }
        noise.fill(n_probe + probe_ix, &mut probe);

        model.drift_jacobian(&x, &mut jac);
        model.diffusion_gradient(&x, &mut grad);
        let mut phi_grad = vec![0.0; m];
        model.observable_gradient(&x, &mut phi_grad);
        for j in 0..m {
            let h = FD_STEP * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            model.drift(&xp, &mut plus);
            model.drift(&xm, &mut minus);
            for i in 0..m {
                let fd = (plus[i] - minus[i]) / (2.0 * h);
                tr.record("drift_jacobian", rel(jac[i * m + j], fd));
            }
            let fd = (model.diffusion(&xp) - model.diffusion(&xm)) / (2.0 * h);
            tr.record("diffusion_gradient", rel(grad[j], fd));
            let fd = (model.observable(&xp) - model.observable(&xm)) / (2.0 * h);
            tr.record("observable_gradient", rel(phi_grad[j], fd));
        }

        model.jacobian_vec(&x, &probe, &mut out);
        for i in 0..m {
            let dense: f64 = (0..m).map(|j| jac[i * m + j] * probe[j]).sum();
            tr.record("jacobian_vec", rel(out[i], dense));
        }
        model.jacobian_transpose_vec(&x, &probe, &mut out);
        for j in 0..m {
            let dense: f64 = (0..m).map(|i| jac[i * m + j] * probe[i]).sum();
            tr.record("jacobian_transpose_vec", rel(out[j], dense));
        }

        if let Some(pairs) = &neighbours {
            for (i, (mp, mm, h)) in pairs.iter().enumerate() {
                model.param_drift_deriv(i, &x, &mut out);
                mp.drift(&x, &mut plus);
                mm.drift(&x, &mut minus);
                for r in 0..m {
                    let fd = (plus[r] - minus[r]) / (2.0 * h);
                    tr.record(&format!("param_drift_deriv[{i}]"), rel(out[r], fd));
                }
                let fd = (mp.diffusion(&x) - mm.diffusion(&x)) / (2.0 * h);
                tr.record(
                    &format!("param_diffusion_deriv[{i}]"),
                    rel(model.param_diffusion_deriv(i, &x), fd),
                );
            }
        }
    }
    Ok(ValidationReport {
        checks: tr.0,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, TimeKind};

    fn cubic(jac_factor: f64) -> ModelSpec {
        ModelSpec::builder(2, TimeKind::DiscreteMap)
            .drift(
                |x, o| o.copy_from_slice(&[x[0] * x[0] * x[1], x[1].sin()]),
                move |x, j| {
                    j.copy_from_slice(&[2.0 * x[0] * x[1] * jac_factor, x[0] * x[0], 0.0, x[1].cos()])
                },
            )
            .diffusion(|x| 1.0 + x[0] * x[0], |x, g| g.copy_from_slice(&[2.0 * x[0], 0.0]))
            .param(|_, o| o.fill(1.0), |_| 0.0)
            .observable(|x| x[0] * x[1], |x, g| g.copy_from_slice(&[x[1], x[0]]))
            .x0(vec![0.3, -0.2])
            .build()
            .unwrap()
    }

    #[test]
    fn correct_derivatives_pass() {
        let r = validate_model(&cubic(1.0), None, 8, 1e-6, 1).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.checks.iter().any(|c| c.field == "jacobian_transpose_vec"));
    }

    #[test]
    fn wrong_jacobian_is_named() {
        let r = validate_model(&cubic(1.5), None, 8, 1e-6, 1).unwrap();
        let failed: Vec<_> = r.failures().iter().map(|c| c.field.clone()).collect();
        assert_eq!(failed, vec!["drift_jacobian".to_string()]);
        assert!(matches!(r.into_result(), Err(Error::InvalidModel(_))));
    }
}
