//! Path-kernel linear response for random dynamical systems.
//!
//! Given a parameterized random map or Ito SDE, this crate estimates the
//! derivative of an averaged observable with respect to the parameters,
//! either at a fixed time or under the stationary measure. A damped tangent
//! or adjoint carries part of the perturbation along the orbit and the rest
//! is moved into the noise kernel through a damping schedule `alpha`, so the
//! estimators stay bounded on chaotic systems.
//!
//! ```no_run
//! use pathkernel::{stationary_gradient, zoo, EstimatorConfig, Schedule, StorageMode};
//!
//! let model = zoo::lorenz96(zoo::Lorenz96Params::default()).unwrap();
//! let config = EstimatorConfig::stationary(0.002, 2000.0, 2.0, 1)
//!     .with_storage(StorageMode::CheckpointReplay);
//! let est = stationary_gradient(&model, &config, &Schedule::Constant(5.0)).unwrap();
//! println!("{:?} +- {:?}", est.values, est.std_errors);
//! ```

mod adjoint;
mod config;
mod error;
mod estimate;
mod model;
mod noise;
pub mod oracle;
mod schedule;
mod sim;
pub mod stats;
mod tangent;
mod validate;
pub mod zoo;

pub use adjoint::{
    adjoint_finite_time_gradient, adjoint_sweep_ergodic, adjoint_sweep_finite,
    pathwise_equivalence_check, stationary_gradient, CovectorPath, Equivalence, IdentityForm,
    SweepMode, COVECTOR_BLOW_UP_FACTOR,
};
pub use config::{steps_for, EstimatorConfig, PhiAvgMode, StorageMode};
pub use error::{Error, Result};
pub use estimate::{CovectorStats, GradientEstimate, TermBreakdown};
pub use model::{
    discretize_sde, Discretized, Model, ModelFamily, ModelSpec, ModelSpecBuilder, ParamAlias,
    ScalarField, TimeKind, VectorField,
};
pub use noise::{NoiseCursor, NoiseStream};
pub use schedule::Schedule;
pub use sim::{
    replay_noise, run_forward, simulate_path, terminal_reference, write_path_csv, Checkpoint,
    Path, PathStorage, Segment, BLOW_UP_THRESHOLD,
};
pub use tangent::{tangent_ergodic_estimate, tangent_finite_time_estimate, tangent_sweep, TangentPath};
pub use validate::{validate_model, FieldCheck, ValidationReport};
