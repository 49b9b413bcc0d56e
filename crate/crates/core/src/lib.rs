//! Estimation of parameters defined by moment conditions `E Φ(θ₀, X) = 0`.
//!
//! Provides fixed-weight, two-step and continuously updated GMM, generalized
//! empirical likelihood through the conjugate dual, semiparametric efficiency
//! bounds, approximate moment functions, and a seeded Monte Carlo harness.
//!
//! Numerical code is generic over [`Scalar`] (`f32`, `f64`); the aliases at
//! the crate root fix `f64`.

pub mod approx;
pub mod bounds;
pub mod error;
pub mod gel;
pub mod gmm;
pub mod linalg;
pub mod moment;
pub mod montecarlo;
pub mod optim;
pub mod registry;
pub mod scalar;

pub use approx::{approx_cue, approx_two_step, perturb_constraint, rate_experiment, Level, Rate, RateTable};
pub use bounds::{efficiency_bound, gmm_bound, verify_lemma1, BoundsSummary};
pub use error::{Error, Result};
pub use gel::{gel_estimate, inner_dual, GelConfig};
pub use gmm::{cue, estimate_gmm, gmm_fixed, gmm_two_step, EstimateSummary, EstimatorConfig};
pub use moment::{
    eval_centered_precision, eval_jacobian, eval_moment, eval_second_moment, MomentModel, ThetaBox, DEFAULT_COND_CAP,
};
pub use montecarlo::{
    derive_seed, empirical_variance, replicate, run_experiment, run_rate_experiment, ExperimentConfig, RunOptions,
};
pub use optim::OptimizerConfig;
pub use scalar::Scalar;

pub type MomentProblem = moment::MomentProblem<f64>;
pub type Sample = moment::Sample<f64>;
pub type EstimateResult = gmm::EstimateResult<f64>;
pub type WeightingScheme = gmm::WeightingScheme<f64>;
pub type ApproximateProblem = approx::ApproximateProblem<f64>;
pub type Divergence = gel::Divergence<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
