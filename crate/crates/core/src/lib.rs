//! Sharp large-deviation estimates for additive-noise SDEs.
//!
//! The crate computes the instanton (the most likely noise realization
//! reaching an extreme observable value), the Gaussian prefactor through
//! a Fredholm determinant or a matrix Riccati equation, the conditioned
//! fluctuation tube around the instanton, and Monte Carlo references.

pub mod covariance;
pub mod error;
pub mod estimates;
pub mod grid;
pub mod instanton;
pub mod path;
pub mod problem;
pub mod problems;
pub mod propagate;
pub mod riccati;
mod rng;
pub mod sampling;
pub mod second_variation;
pub mod spectrum;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use path::{l2_inner, project_orthogonal, Path};
pub use problem::{LinearPart, ProblemSpec};
pub use propagate::{
    checkpointed_apply, gradient, solve_adjoint, solve_linearized_pair, solve_state, CheckpointPlan,
    IntegratorConfig, Scheme,
};
pub use instanton::{
    rate_function_sweep, solve_instanton, solve_instanton_from, InstantonConfig, InstantonResult,
};
pub use second_variation::{ApplyMode, SecondVariationOperator};
pub use spectrum::{dominant_eigenpairs, fredholm_determinant, FredholmDeterminant, SpectrumConfig, PLATEAU_TOL, SpectrumResult};
pub use riccati::{final_time_covariance_riccati, prefactor_riccati, solve_riccati, RiccatiConfig, RiccatiResult};
pub use estimates::{
    finite_dim_sorm, pdf_estimate, prefactor_fredholm, tail_probability, EstimateReport, LogValue, SmoothFunctional,
};
pub use covariance::{build_tube, TubeConfig, TubeModel};
pub use sampling::{
    direct_tail_mc, importance_sampled_paths, importance_sampled_tail, wilson_interval, ConditionedSamples, McConfig,
    SdeScheme,
};
