//! Forward, adjoint, linearized and second-adjoint sweeps.
//!
//! Everything here is the exact discrete derivative of the discrete forward
//! map `η ↦ φ` defined by [`scheme`]. Adjoint paths are reported at the
//! grid nodes, normalized by the quadrature weights, so that `σᵀθ` is the
//! gradient of `λ F` with respect to the weighted inner product of
//! [`Path::inner`] and the terminal values are `θ(T) = λ ∇f(φ(T))` and
//! `ζ(T) = λ ∇²f(φ(T)) γ(T)` exactly.

mod checkpoint;
pub(crate) mod scheme;

use std::sync::Arc;

pub use checkpoint::{checkpointed_apply, CheckpointPlan, CheckpointStats};
pub use scheme::{IntegratorConfig, Scheme};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::path::Path;
use crate::problem::ProblemSpec;
use scheme::{ReverseOut, Stepper};

fn check_noise(spec: &dyn ProblemSpec, eta: &Path) -> Result<()> {
    if eta.width() != spec.noise_rank() {
        return Err(Error::Dimension(format!(
            "noise path has width {}, problem has noise rank {}",
            eta.width(),
            spec.noise_rank()
        )));
    }
    Ok(())
}

fn check_state(spec: &dyn ProblemSpec, p: &Path, grid: &TimeGrid, what: &str) -> Result<()> {
    if p.width() != spec.state_dim() {
        return Err(Error::Dimension(format!(
            "{what} path has width {}, state dimension is {}",
            p.width(),
            spec.state_dim()
        )));
    }
    if !p.grid().same_as(grid) {
        return Err(Error::Dimension(format!("{what} path lives on a different grid")));
    }
    Ok(())
}

fn finite_or(v: &[f64], node: usize, stage: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { node, stage })
    }
}

/// Per-node forcing `σ η_i`, computed on demand.
pub(crate) struct Forcing<'a> {
    spec: &'a dyn ProblemSpec,
    eta: &'a Path,
}

impl<'a> Forcing<'a> {
    pub fn new(spec: &'a dyn ProblemSpec, eta: &'a Path) -> Self {
        Self { spec, eta }
    }

    pub fn at(&self, i: usize, out: &mut [f64]) {
        self.spec.sigma_apply(self.eta.node(i), out);
    }
}

/// Integrates `φ̇ = b(φ) + σ η` from the initial state.
pub fn solve_state(spec: &dyn ProblemSpec, eta: &Path, cfg: &IntegratorConfig) -> Result<Path> {
    check_noise(spec, eta)?;
    let grid = eta.grid().clone();
    let n = spec.state_dim();
    let x0 = spec.initial_state();
    if x0.len() != n {
        return Err(Error::Dimension("initial state length differs from state_dim".into()));
    }
    let mut phi = Path::zeros(grid.clone(), n);
    phi.node_mut(0).copy_from_slice(&x0);
    let mut st = Stepper::new(spec, cfg);
    let force = Forcing::new(spec, eta);
    let (mut sa, mut sb, mut next) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    force.at(0, &mut sa);
    for i in 0..grid.n_intervals() {
        force.at(i + 1, &mut sb);
        st.forward(grid.step(i), phi.node(i), &sa, &sb, &mut next);
        finite_or(&next, i + 1, "state")?;
        phi.node_mut(i + 1).copy_from_slice(&next);
        std::mem::swap(&mut sa, &mut sb);
    }
    Ok(phi)
}

/// Final state `φ(T)` without storing the path.
pub fn final_state(spec: &dyn ProblemSpec, eta: &Path, cfg: &IntegratorConfig) -> Result<Vec<f64>> {
    check_noise(spec, eta)?;
    let grid = eta.grid().clone();
    let n = spec.state_dim();
    let mut x = spec.initial_state();
    let mut st = Stepper::new(spec, cfg);
    let force = Forcing::new(spec, eta);
    let (mut sa, mut sb, mut next) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    force.at(0, &mut sa);
    for i in 0..grid.n_intervals() {
        force.at(i + 1, &mut sb);
        st.forward(grid.step(i), &x, &sa, &sb, &mut next);
        finite_or(&next, i + 1, "state")?;
        std::mem::swap(&mut x, &mut next);
        std::mem::swap(&mut sa, &mut sb);
    }
    Ok(x)
}

/// `F[η] = f(φ(T))`
pub fn observable_of(spec: &dyn ProblemSpec, eta: &Path, cfg: &IntegratorConfig) -> Result<f64> {
    Ok(spec.observable(&final_state(spec, eta, cfg)?))
}

/// Backward sweep for an arbitrary terminal cotangent `v`: returns the node
/// adjoint `θ` with `θ(T) = v`, so that `σᵀθ` represents `η ↦ ⟨v, φ(T)⟩`'s
/// derivative.
pub fn adjoint_from_terminal(
    spec: &dyn ProblemSpec,
    eta: &Path,
    phi: &Path,
    terminal: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Path> {
    check_noise(spec, eta)?;
    let grid = eta.grid().clone();
    check_state(spec, phi, &grid, "state")?;
    let n = spec.state_dim();
    if terminal.len() != n {
        return Err(Error::Dimension("terminal cotangent length differs from state_dim".into()));
    }
    let nt = grid.n_intervals();
    let mut acc = Path::zeros(grid.clone(), n);
    let mut st = Stepper::new(spec, cfg);
    let force = Forcing::new(spec, eta);
    let mut p = terminal.to_vec();
    let (mut p_prev, mut sa, mut ca, mut cb) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in (0..nt).rev() {
        force.at(i, &mut sa);
        st.reverse(
            grid.step(i),
            phi.node(i),
            &sa,
            &p,
            ReverseOut {
                p: &mut p_prev,
                ca: &mut ca,
                cb: &mut cb,
            },
        );
        finite_or(&p_prev, i, "adjoint")?;
        let right = acc.node_mut(i + 1);
        for k in 0..n {
            right[k] += cb[k];
        }
        acc.node_mut(i).copy_from_slice(&ca);
        std::mem::swap(&mut p, &mut p_prev);
    }
    let w = grid.weights();
    for i in 0..=nt {
        let wi = w[i];
        acc.node_mut(i).iter_mut().for_each(|v| *v /= wi);
    }
    // exact terminal value
    acc.node_mut(nt).copy_from_slice(terminal);
    Ok(acc)
}

/// Adjoint `θ` for `λ F` along `φ = solve_state(η)`.
pub fn solve_adjoint(
    spec: &dyn ProblemSpec,
    eta: &Path,
    phi: &Path,
    lambda: f64,
    cfg: &IntegratorConfig,
) -> Result<Path> {
    let n = spec.state_dim();
    let mut v = vec![0.0; n];
    spec.observable_gradient(phi.last(), &mut v);
    v.iter_mut().for_each(|x| *x *= lambda);
    adjoint_from_terminal(spec, eta, phi, &v, cfg)
}

/// `σᵀ θ` node by node.
pub fn noise_projection(spec: &dyn ProblemSpec, theta: &Path) -> Path {
    let r = spec.noise_rank();
    let mut out = Path::zeros(theta.grid().clone(), r);
    for i in 0..theta.n_nodes() {
        spec.sigma_adjoint(theta.node(i), out.node_mut(i));
    }
    out
}

/// `σ w` node by node.
pub fn noise_embedding(spec: &dyn ProblemSpec, w: &Path) -> Path {
    let n = spec.state_dim();
    let mut out = Path::zeros(w.grid().clone(), n);
    for i in 0..w.n_nodes() {
        spec.sigma_apply(w.node(i), out.node_mut(i));
    }
    out
}

/// Gradient of `λ F` at `η` in the weighted `L²` geometry, i.e. `σᵀθ`.
pub fn gradient(spec: &dyn ProblemSpec, eta: &Path, lambda: f64, cfg: &IntegratorConfig) -> Result<Path> {
    let phi = solve_state(spec, eta, cfg)?;
    let theta = solve_adjoint(spec, eta, &phi, lambda, cfg)?;
    Ok(noise_projection(spec, &theta))
}

/// `F[η]` together with the gradient of `F` (unit multiplier).
pub fn value_and_gradient(
    spec: &dyn ProblemSpec,
    eta: &Path,
    cfg: &IntegratorConfig,
) -> Result<(f64, Path, Path)> {
    let phi = solve_state(spec, eta, cfg)?;
    let theta = solve_adjoint(spec, eta, &phi, 1.0, cfg)?;
    let f = spec.observable(phi.last());
    Ok((f, noise_projection(spec, &theta), phi))
}

/// Linearized state `γ` driven by `σ δη` along `φ = solve_state(η)`.
pub fn solve_linearized_state(
    spec: &dyn ProblemSpec,
    eta: &Path,
    phi: &Path,
    delta: &Path,
    cfg: &IntegratorConfig,
) -> Result<Path> {
    check_noise(spec, eta)?;
    check_noise(spec, delta)?;
    let grid = eta.grid().clone();
    check_state(spec, phi, &grid, "state")?;
    if !delta.grid().same_as(&grid) {
        return Err(Error::Dimension("perturbation lives on a different grid".into()));
    }
    let n = spec.state_dim();
    let mut gamma = Path::zeros(grid.clone(), n);
    let mut st = Stepper::new(spec, cfg);
    let force = Forcing::new(spec, eta);
    let dforce = Forcing::new(spec, delta);
    let (mut sa, mut dsa, mut dsb, mut next) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    dforce.at(0, &mut dsa);
    for i in 0..grid.n_intervals() {
        force.at(i, &mut sa);
        dforce.at(i + 1, &mut dsb);
        st.tangent(grid.step(i), phi.node(i), gamma.node(i), &sa, &dsa, &dsb, &mut next);
        finite_or(&next, i + 1, "linearized state")?;
        gamma.node_mut(i + 1).copy_from_slice(&next);
        std::mem::swap(&mut dsa, &mut dsb);
    }
    Ok(gamma)
}

/// Linearized state `γ` and second-order adjoint `ζ` for direction `δη`.
///
/// The first-order adjoint is recomputed step by step from `η` and `φ`, so
/// only the state path is needed. `σᵀζ` is the Hessian of `λ F` applied to
/// `δη` in the weighted `L²` geometry.
pub fn solve_linearized_pair(
    spec: &dyn ProblemSpec,
    eta: &Path,
    phi: &Path,
    lambda: f64,
    delta: &Path,
    cfg: &IntegratorConfig,
) -> Result<(Path, Path)> {
    let gamma = solve_linearized_state(spec, eta, phi, delta, cfg)?;
    let grid = eta.grid().clone();
    let n = spec.state_dim();
    let nt = grid.n_intervals();
    let mut st = Stepper::new(spec, cfg);
    let force = Forcing::new(spec, eta);
    let dforce = Forcing::new(spec, delta);

    let mut p = vec![0.0; n];
    spec.observable_gradient(phi.last(), &mut p);
    p.iter_mut().for_each(|v| *v *= lambda);
    let mut z = vec![0.0; n];
    spec.observable_hessian_action(phi.last(), gamma.last(), &mut z);
    z.iter_mut().for_each(|v| *v *= lambda);
    let z_terminal = z.clone();

    let mut zeta = Path::zeros(grid.clone(), n);
    let mut b = Buffers::new(n);
    for i in (0..nt).rev() {
        force.at(i, &mut b.sa);
        dforce.at(i, &mut b.dsa);
        st.reverse_second(
            grid.step(i),
            phi.node(i),
            gamma.node(i),
            &b.sa,
            &b.dsa,
            &p,
            &z,
            ReverseOut {
                p: &mut b.p_prev,
                ca: &mut b.ca,
                cb: &mut b.cb,
            },
            ReverseOut {
                p: &mut b.z_prev,
                ca: &mut b.dca,
                cb: &mut b.dcb,
            },
        );
        finite_or(&b.z_prev, i, "second-order adjoint")?;
        let right = zeta.node_mut(i + 1);
        for k in 0..n {
            right[k] += b.dcb[k];
        }
        zeta.node_mut(i).copy_from_slice(&b.dca);
        std::mem::swap(&mut p, &mut b.p_prev);
        std::mem::swap(&mut z, &mut b.z_prev);
    }
    let w = grid.weights();
    for i in 0..=nt {
        let wi = w[i];
        zeta.node_mut(i).iter_mut().for_each(|v| *v /= wi);
    }
    zeta.node_mut(nt).copy_from_slice(&z_terminal);
    Ok((gamma, zeta))
}

/// Hessian of `λ F` at `η` applied to `δη`, i.e. `σᵀζ`, storing the full
/// linearized path.
pub fn hessian_apply(
    spec: &dyn ProblemSpec,
    eta: &Path,
    phi: &Path,
    lambda: f64,
    delta: &Path,
    cfg: &IntegratorConfig,
) -> Result<Path> {
    let (_, zeta) = solve_linearized_pair(spec, eta, phi, lambda, delta, cfg)?;
    Ok(noise_projection(spec, &zeta))
}

pub(crate) struct Buffers {
    pub sa: Vec<f64>,
    pub dsa: Vec<f64>,
    pub p_prev: Vec<f64>,
    pub z_prev: Vec<f64>,
    pub ca: Vec<f64>,
    pub cb: Vec<f64>,
    pub dca: Vec<f64>,
    pub dcb: Vec<f64>,
}

impl Buffers {
    pub fn new(n: usize) -> Self {
        Self {
            sa: vec![0.0; n],
            dsa: vec![0.0; n],
            p_prev: vec![0.0; n],
            z_prev: vec![0.0; n],
            ca: vec![0.0; n],
            cb: vec![0.0; n],
            dca: vec![0.0; n],
            dcb: vec![0.0; n],
        }
    }
}

/// Shared grid helper used by tests and callers that build noise paths.
pub fn zero_noise(spec: &dyn ProblemSpec, grid: Arc<TimeGrid>) -> Path {
    Path::zeros(grid, spec.noise_rank())
}
