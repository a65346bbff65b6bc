//! Single-timescale double-momentum stochastic bilevel optimization.
//!
//! The crate solves `min_x f(x, y*(x))` subject to `y*(x) = argmin_y g(x, y)`
//! using only sampled gradients of `f` and `g` and sampled Hessian-vector
//! products of `g`. The pieces are:
//!
//! - [`oracle`]: the sampled problem interface and constant validation,
//! - [`hypergradient`]: the truncated-Neumann hypergradient estimator,
//! - [`momentum`]: recursive momentum trackers for both levels,
//! - [`schedules`]: step-size and momentum schedules,
//! - [`driver`]: the optimizer loop and baseline methods,
//! - [`testbed`]: analytic test problems,
//! - [`metrics`]: rate fits and sample-complexity summaries.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod driver;
pub mod error;
pub mod hypergradient;
pub mod metrics;
pub mod momentum;
pub mod oracle;
pub mod sample;
pub mod schedules;
pub mod testbed;

/// Dense real vector used for iterates and gradients.
pub type Vector = nalgebra::DVector<f64>;

pub use driver::{
    adam_direction, run_baseline, run_sustain, AdamState, BaselineKind, Direction, RunConfig,
    RunOutput, TrajectoryRecord,
};
pub use error::{Error, Result};
pub use hypergradient::{
    bias_bound, choose_k_nonconvex, choose_k_strongly_convex, estimate, lipschitz_l_k,
    HyperGradSample, KChoice, NeumannConfig,
};
pub use metrics::{fit_rate_exponent, samples_to_epsilon, Metric, RateFit};
pub use momentum::{EstimatorErrors, EstimatorVariant, MomentumState};
pub use oracle::{
    check_oracle_consistency, validate_constants, BilevelOracle, ConsistencyReport, CountingOracle,
    DerivedConstants, ExactOracle, IteratePair, ProblemConstants, ValidationReport,
};
pub use sample::{CompositeSample, SampleStream, SampleToken};
pub use schedules::{ScheduleParams, SchedulePolicy};
