//! Prefactor through the forward matrix Riccati equation
//!
//! ```text
//! Q̇ = a + Q ∇bᵀ + ∇b Q + Q ⟨∇²b, θ⟩ Q,   Q(0) = 0,
//! ```
//!
//! integrated along the instanton with the integrating-factor scheme that
//! the propagators use for the state.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instanton::InstantonResult;
use crate::problem::{diffusion_matrix, ProblemSpec};
use crate::propagate::{IntegratorConfig, Scheme};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiccatiConfig {
    /// `None` reuses the integrator of the instanton.
    pub integrator: Option<IntegratorConfig>,
    /// Largest state dimension for dense storage.
    pub max_dim: usize,
    /// Frobenius norm of `Q` treated as blow-up.
    pub blowup_norm: f64,
    /// Keep `Q(t)` at every node. `None` keeps it when the path holds at
    /// most 5e7 entries.
    pub store_path: Option<bool>,
}

impl Default for RiccatiConfig {
    fn default() -> Self {
        Self {
            integrator: None,
            max_dim: 4096,
            blowup_norm: 1e12,
            store_path: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiResult {
    pub q_path: Option<Vec<DMatrix<f64>>>,
    pub q_final: DMatrix<f64>,
    /// `∫ tr[⟨∇²b(φ), θ⟩ Q] dt`, trapezoidal.
    pub trace_integral: f64,
    /// `U = 1 − λ ∇²f(φ(T)) Q(T)`
    pub u: DMatrix<f64>,
    pub lambda: f64,
    /// `∇f(φ(T))`
    pub obs_gradient: Vec<f64>,
    /// `(t, ‖Q_{i+1}‖ / ‖Q_i‖)` for steps where the norm jumped tenfold.
    pub singularity_events: Vec<(f64, f64)>,
    /// Largest `‖Q − Qᵀ‖ / ‖Q‖` before symmetrization.
    pub max_asymmetry: f64,
}

/// Applies `f(column, out)` to every column in parallel.
fn map_columns(q: &DMatrix<f64>, f: impl Fn(&[f64], &mut [f64]) + Sync) -> DMatrix<f64> {
    let n = q.nrows();
    let mut out = DMatrix::zeros(n, q.ncols());
    out.as_mut_slice()
        .par_chunks_mut(n)
        .zip(q.as_slice().par_chunks(n))
        .for_each(|(o, c)| f(c, o));
    out
}

struct Field<'a> {
    spec: &'a dyn ProblemSpec,
    a: DMatrix<f64>,
    use_if: bool,
}

impl Field<'_> {
    /// `E X Eᵀ` for symmetric `X`.
    fn sandwich(&self, h: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
        let l = match (self.use_if, self.spec.linear_part()) {
            (true, Some(l)) => l,
            _ => return x.clone(),
        };
        let ex = map_columns(x, |c, o| l.propagate(h, c, o));
        map_columns(&ex.transpose(), |c, o| l.propagate(h, c, o))
    }

    /// Right-hand side without `a` and `tr[H Q]`.
    fn drift(&self, x: &[f64], theta: &[f64], q: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
        let jq = if self.use_if {
            map_columns(q, |c, o| self.spec.nonlinear_jacobian_action(x, c, o))
        } else {
            map_columns(q, |c, o| self.spec.jacobian_action(x, c, o))
        };
        let hq = map_columns(q, |c, o| self.spec.hessian_bilinear(x, theta, c, o));
        let tr = hq.trace();
        (&jq + jq.transpose() + q * hq, tr)
    }
}

fn symmetrize(q: &mut DMatrix<f64>) -> f64 {
    let nrm = q.norm();
    let asym = (&*q - q.transpose()).norm();
    *q = (&*q + q.transpose()) * 0.5;
    if nrm > 0.0 {
        asym / nrm
    } else {
        0.0
    }
}

pub fn solve_riccati(spec: &dyn ProblemSpec, instanton: &InstantonResult, cfg: &RiccatiConfig) -> Result<RiccatiResult> {
    let n = spec.state_dim();
    if n > cfg.max_dim {
        return Err(Error::InvalidArgument(format!(
            "state dimension {n} exceeds the dense Riccati cap {}",
            cfg.max_dim
        )));
    }
    if instanton.phi.width() != n || instanton.theta.width() != n {
        return Err(Error::Dimension("instanton does not match the problem".into()));
    }
    let integ = cfg.integrator.unwrap_or(instanton.integrator);
    let field = Field {
        spec,
        a: DMatrix::from_row_slice(n, n, &diffusion_matrix(spec)),
        use_if: integ.integrating_factor && spec.linear_part().is_some(),
    };
    let grid = instanton.grid();
    let nt = grid.n_intervals();
    let store = cfg.store_path.unwrap_or((n * n) as f64 * (nt + 1) as f64 <= 5e7);
    let (phi, theta) = (&instanton.phi, &instanton.theta);

    let mut q = DMatrix::zeros(n, n);
    let mut path = store.then(|| vec![q.clone()]);
    let mut trace_integral = 0.0;
    let mut events = Vec::new();
    let mut max_asym: f64 = 0.0;
    let mut prev_norm = 0.0;
    let (mut g_cur, mut tr_cur) = field.drift(phi.node(0), theta.node(0), &q);
    for i in 0..nt {
        let h = grid.step(i);
        let g0 = std::mem::replace(&mut g_cur, DMatrix::zeros(0, 0));
        let mut next = match integ.scheme {
            Scheme::EulerIf => {
                // The constant forcing is split between both ends of the step,
                // as for the noise in the state scheme.
                let inner = &q + (g0 * h) + &field.a * (0.5 * h);
                field.sandwich(h, &inner) + &field.a * (0.5 * h)
            }
            Scheme::Rk2If => {
                let k1 = g0 + &field.a;
                let y = field.sandwich(h, &(&q + &k1 * h));
                let (g1, _) = field.drift(phi.node(i + 1), theta.node(i + 1), &y);
                field.sandwich(h, &(&q + &k1 * (0.5 * h))) + (g1 + &field.a) * (0.5 * h)
            }
        };
        max_asym = max_asym.max(symmetrize(&mut next));
        let nrm = next.norm();
        if !nrm.is_finite() || nrm > cfg.blowup_norm {
            return Err(Error::RiccatiSingularity { node: i + 1, norm: nrm });
        }
        if prev_norm > 0.0 && nrm > 10.0 * prev_norm {
            events.push((grid.nodes()[i + 1], nrm / prev_norm));
        }
        prev_norm = nrm;
        q = next;
        let (g1, tr1) = field.drift(phi.node(i + 1), theta.node(i + 1), &q);
        trace_integral += 0.5 * h * (tr_cur + tr1);
        (g_cur, tr_cur) = (g1, tr1);
        if let Some(p) = path.as_mut() {
            p.push(q.clone());
        }
    }

    let xt = phi.last();
    let mut grad = vec![0.0; n];
    spec.observable_gradient(xt, &mut grad);
    let hess = map_columns(&DMatrix::identity(n, n), |c, o| spec.observable_hessian_action(xt, c, o));
    let u = DMatrix::identity(n, n) - &hess * &q * instanton.lambda;
    Ok(RiccatiResult {
        q_path: path,
        q_final: q,
        trace_integral,
        u,
        lambda: instanton.lambda,
        obs_gradient: grad,
        singularity_events: events,
        max_asymmetry: max_asym,
    })
}

impl RiccatiResult {
    /// `Q U⁻¹` and the quadratic form `⟨∇f, Q U⁻¹ ∇f⟩`.
    fn resolvent(&self) -> Result<(DMatrix<f64>, f64)> {
        let uinv = self
            .u
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::AssumptionViolation("U_z is singular".into()))?;
        let mut m = &self.q_final * uinv;
        m = (&m + m.transpose()) * 0.5;
        let g = nalgebra::DVector::from_column_slice(&self.obs_gradient);
        let form = g.dot(&(&m * &g));
        Ok((m, form))
    }
}

/// `C_F = λ⁻¹ exp(½ ∫ tr[⟨∇²b, θ⟩ Q] dt) [det U ⟨∇f, Q U⁻¹ ∇f⟩]^{−1/2}`
pub fn prefactor_riccati(rr: &RiccatiResult) -> Result<f64> {
    if rr.lambda == 0.0 {
        return Err(Error::AssumptionViolation("zero multiplier".into()));
    }
    let (_, form) = rr.resolvent()?;
    let bracket = rr.u.determinant() * form;
    if !(bracket > 0.0) {
        return Err(Error::AssumptionViolation(format!(
            "Riccati bracket det(U)⟨∇f, QU⁻¹∇f⟩ = {bracket} is not positive"
        )));
    }
    Ok((0.5 * rr.trace_integral).exp() / (rr.lambda * bracket.sqrt()))
}

/// Conditioned final-time covariance `Q U⁻¹ − (QU⁻¹∇f)(QU⁻¹∇f)ᵀ / ⟨∇f, QU⁻¹∇f⟩`.
pub fn final_time_covariance_riccati(rr: &RiccatiResult) -> Result<DMatrix<f64>> {
    let (m, form) = rr.resolvent()?;
    if !(form > 0.0) {
        return Err(Error::AssumptionViolation(format!("⟨∇f, QU⁻¹∇f⟩ = {form} is not positive")));
    }
    let g = nalgebra::DVector::from_column_slice(&rr.obs_gradient);
    let v = &m * g;
    let c = m - &v * v.transpose() / form;
    Ok((&c + c.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instanton::{solve_instanton, InstantonConfig};
    use crate::problems::{make_model2d, make_ou};

    fn ou_instanton(nt: usize, integrator: IntegratorConfig) -> (crate::problems::Ou, InstantonResult) {
        let ou = make_ou(1.0, 1.0).unwrap();
        let inst = solve_instanton(
            &ou,
            &InstantonConfig {
                z_target: 1.0,
                n_t: nt,
                integrator,
                ..Default::default()
            },
        )
        .unwrap();
        (ou, inst)
    }

    #[test]
    fn ou_lyapunov_solution() {
        let (ou, inst) = ou_instanton(2000, IntegratorConfig::rk2());
        let rr = solve_riccati(&ou, &inst, &RiccatiConfig::default()).unwrap();
        let sigma = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((rr.q_final[(0, 0)] - sigma).abs() < 1e-6);
        assert_eq!(rr.trace_integral, 0.0);
        let path = rr.q_path.as_ref().unwrap();
        assert_eq!(path[0][(0, 0)], 0.0);
        for (t, q) in inst.grid().nodes().iter().zip(path) {
            let exact = (1.0 - (-2.0 * t).exp()) / 2.0;
            assert!((q[(0, 0)] - exact).abs() < 1e-6);
        }
        let cf = prefactor_riccati(&rr).unwrap();
        assert!((cf - ou.prefactor(1.0)).abs() < 1e-4, "{cf}");
        let c = final_time_covariance_riccati(&rr).unwrap();
        assert!(c[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn euler_scheme_is_first_order_accurate() {
        let sigma = (1.0 - (-2.0f64).exp()) / 2.0;
        let err = |nt| {
            let (ou, inst) = ou_instanton(nt, IntegratorConfig::euler());
            let rr = solve_riccati(&ou, &inst, &RiccatiConfig::default()).unwrap();
            (rr.q_final[(0, 0)] - sigma).abs()
        };
        let (e1, e2) = (err(100), err(200));
        assert!(e1 < 1e-3);
        assert!(e1 / e2 > 1.8, "{e1} {e2}");
    }

    #[test]
    fn model2d_is_regular_symmetric_and_constrained() {
        let m = make_model2d();
        let inst = solve_instanton(
            &m,
            &InstantonConfig {
                z_target: 3.0,
                n_t: 1000,
                ..Default::default()
            },
        )
        .unwrap();
        let rr = solve_riccati(&m, &inst, &RiccatiConfig::default()).unwrap();
        assert!(rr.singularity_events.is_empty());
        assert!(rr.max_asymmetry <= 1e-10);
        assert!(prefactor_riccati(&rr).unwrap() > 0.0);
        let c = final_time_covariance_riccati(&rr).unwrap();
        let g = nalgebra::DVector::from_column_slice(&rr.obs_gradient);
        assert!((&c * &g).norm() <= 1e-10 * c.norm() * g.norm());
        let eig = nalgebra::SymmetricEigen::new(c.clone()).eigenvalues;
        assert!(eig.iter().all(|&e| e >= -1e-12 * c.norm()));
    }

    #[test]
    fn rk2_prefactor_converges_at_second_order() {
        let m = make_model2d();
        let cf = |nt| {
            let inst = solve_instanton(
                &m,
                &InstantonConfig {
                    z_target: 3.0,
                    n_t: nt,
                    ..Default::default()
                },
            )
            .unwrap();
            prefactor_riccati(&solve_riccati(&m, &inst, &RiccatiConfig::default()).unwrap()).unwrap()
        };
        let (c1, c2, c4) = (cf(100), cf(200), cf(400));
        let ratio = (c1 - c2).abs() / (c2 - c4).abs();
        assert!(ratio >= 3.0, "{c1} {c2} {c4} {ratio}");
    }

    #[test]
    fn rejects_oversized_state_and_blow_up() {
        let (ou, inst) = ou_instanton(100, IntegratorConfig::rk2());
        let cfg = RiccatiConfig {
            max_dim: 0,
            ..Default::default()
        };
        assert!(solve_riccati(&ou, &inst, &cfg).is_err());
        let cfg = RiccatiConfig {
            blowup_norm: 0.1,
            ..Default::default()
        };
        assert!(matches!(
            solve_riccati(&ou, &inst, &cfg),
            Err(Error::RiccatiSingularity { .. })
        ));
    }
}
