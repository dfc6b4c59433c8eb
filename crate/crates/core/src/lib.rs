//! Policy evaluation by Bellman residual minimization.
//!
//! A single observed trajectory gives one next state per visited state, so
//! the unbiased residual gradient (which needs two independent next states)
//! is out of reach without a model. The BFF ("borrow from the future")
//! estimators stand in for the missing copy with `s_m + (s_(m+2) − s_(m+1))`.
//! This crate provides those estimators together with the oracle, naive and
//! primal-dual baselines, exact tabular references, and Monte-Carlo tools for
//! measuring the resulting objective bias.

pub mod approximator;
pub mod bias;
pub mod compensated;
pub mod env;
pub mod error;
pub mod residual;
pub mod rng;
pub mod tabular;
pub mod trainer;

pub use approximator::{ApproxKind, CosineMlp, TabularValues, ValueApproximator};
pub use env::{ContinuousEnvSpec, DiscreteEnvSpec, EnvKind, EnvSpec, State, Trajectory};
pub use error::{Error, Result};
pub use residual::{EstimatorKind, GradientEstimate, TransitionWindow};
pub use trainer::{ErrorTrace, ReferenceSolution, TrainConfig};
