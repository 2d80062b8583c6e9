//! Shared fixtures for the benchmarks.

use sharpldt::problems::{make_model2d, Model2d};
use sharpldt::{solve_instanton, InstantonConfig, InstantonResult, IntegratorConfig};

/// The 2D model and its instanton at `z = 3` on `n_t` Euler steps.
pub fn model2d_instanton(n_t: usize) -> (Model2d, InstantonResult) {
    let m = make_model2d();
    let inst = solve_instanton(
        &m,
        &InstantonConfig {
            z_target: 3.0,
            n_t,
            integrator: IntegratorConfig::euler(),
            ..Default::default()
        },
    )
    .expect("instanton");
    (m, inst)
}
