//! Implicit Q-learning at tabular scale.
//!
//! Expectile regression, exact dynamic-programming oracles, offline datasets,
//! small differentiable approximators and the IQL learner. Numeric code is
//! generic over [`Scalar`] (`f32`/`f64`); the aliases below fix `f64`.

pub mod approx;
pub mod data;
pub mod expectile;
pub mod learner;
pub mod mdp;
pub mod oracle;
pub mod scalar;

pub use scalar::Scalar;

pub type Mdp = mdp::TabularMdp<f64>;
pub type Data = data::Dataset<f64>;
pub type Learner = learner::LearnerState<f64>;
pub type Model = approx::Approximator<f64>;
