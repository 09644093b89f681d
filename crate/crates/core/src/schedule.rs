use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Damping schedule `alpha_n`.
///
/// The value at step `n` may depend on `n` and the current state `x_n` only.
/// For SDE models the sweeps multiply it by the time step, so a schedule is
/// always given in continuous-time units (per unit time).
#[derive(Clone)]
pub enum Schedule {
    Constant(f64),
    Adapted(Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>),
}

impl Schedule {
    pub fn constant(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "schedule must be a finite nonnegative number, got {alpha}"
            )));
        }
        Ok(Schedule::Constant(alpha))
    }

    pub fn adapted(f: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Schedule::Adapted(Arc::new(f))
    }

    /// `alpha_n` evaluated at step `n` and state `x`.
    pub fn at(&self, n: usize, x: &[f64]) -> Result<f64> {
        let value = match self {
            Schedule::Constant(c) => *c,
            Schedule::Adapted(f) => f(n, x),
        };
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::InvalidSchedule { step: n, value });
        }
        Ok(value)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Schedule::Constant(c) if *c == 0.0)
    }
}

impl fmt::Debug for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant(c) => write!(f, "Schedule::Constant({c})"),
            Schedule::Adapted(_) => f.write_str("Schedule::Adapted(..)"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_rejects_negative() {
        assert!(Schedule::constant(-0.1).is_err());
        assert!(Schedule::constant(f64::INFINITY).is_err());
        assert_eq!(Schedule::constant(2.0).unwrap().at(7, &[]).unwrap(), 2.0);
    }

    #[test]
    fn adapted_values_are_checked_per_step() {
        let s = Schedule::adapted(|n, x| x[0] - n as f64);
        assert_eq!(s.at(1, &[3.0]).unwrap(), 2.0);
        assert_eq!(
            s.at(4, &[3.0]).unwrap_err(),
            Error::InvalidSchedule { step: 4, value: -1.0 }
        );
    }
}
