//! Kalman filtering with a local gain-adaptation rule.
//!
//! - [`lds`]: linear dynamical system models and seeded simulation
//! - [`kalman`]: the exact Kalman recursion and its steady-state gain
//! - [`rpe`]: online gain adaptation by recursive prediction error, with an
//!   exponentiated-gradient gain parametrisation
//! - [`netgraph`]: the adaptive filter as an executable network of typed
//!   synapses, with a locality audit
//! - [`harness`]: configuration-driven experiments and CSV/JSON output
//! - [`selftest`]: quick invariant checks

pub mod error;
pub mod harness;
pub mod kalman;
pub mod lds;
pub mod linalg;
pub mod netgraph;
pub mod rpe;
pub mod selftest;

pub use error::{Error, Result};
pub use kalman::{
    filter_trajectory, kf_step, predict_step, prediction_gain, steady_state_gain, KalmanState,
    SteadyState,
};
pub use lds::{sample_gaussian, simulate, validate_model, GaussianSampler, LdsModel, Trajectory};
pub use rpe::{
    gain_from_theta, gamma, lambda_update_direct, lambda_update_inverse, multiplicative_gain_update,
    rpe_step, rpe_step_matrix, Dynamics, GammaSchedule, LambdaMode, MatrixRpeState, RpeConfig,
    RpeState, StepFlags, StepOutput,
};
