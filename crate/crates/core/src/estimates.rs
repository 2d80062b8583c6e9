//! Sharp tail-probability and density estimates, plus a dense
//! finite-dimensional Laplace (SORM) evaluation used for cross-checks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::instanton::InstantonResult;
use crate::path::Path;
use crate::problem::ProblemSpec;
use crate::propagate::{self, IntegratorConfig};
use crate::spectrum::{fredholm_determinant, FredholmDeterminant, SpectrumResult};

use std::f64::consts::PI;
use std::sync::Arc;

/// A positive quantity carried in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogValue {
    /// Natural logarithm; `-inf` for zero.
    pub ln: f64,
}

impl LogValue {
    pub fn from_ln(ln: f64) -> Self {
        Self { ln }
    }

    pub fn value(&self) -> f64 {
        self.ln.exp()
    }

    pub fn log10(&self) -> f64 {
        self.ln / std::f64::consts::LN_10
    }
}

/// `P(f(X_T) ≥ z) ≈ (ε/2π)^{1/2} C_F exp(−I_F/ε)`
pub fn tail_probability(rate: f64, prefactor: f64, eps: f64) -> Result<LogValue> {
    check_eps(eps)?;
    Ok(LogValue::from_ln(
        0.5 * (eps / (2.0 * PI)).ln() + prefactor.ln() - rate / eps,
    ))
}

/// `ρ(z) ≈ (2πε)^{−1/2} λ_z C_F exp(−I_F/ε)`
pub fn pdf_estimate(rate: f64, lambda: f64, prefactor: f64, eps: f64) -> Result<LogValue> {
    check_eps(eps)?;
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "negative multiplier {lambda}: lower tails need the reflected observable"
        )));
    }
    Ok(LogValue::from_ln(
        -0.5 * (2.0 * PI * eps).ln() + lambda.ln() + prefactor.ln() - rate / eps,
    ))
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("noise strength must be positive, got {eps}")))
    }
}

/// `C_F = [2 I_F det(Id − A_z)]^{−1/2}` with the determinant from the
/// dominant eigenvalues.
///
/// Refuses to produce a number unless the eigensolver converged and the
/// partial products have settled.
pub fn prefactor_fredholm(
    instanton: &InstantonResult,
    sr: &SpectrumResult,
    truncation_tol: f64,
) -> Result<(f64, FredholmDeterminant)> {
    let det = fredholm_determinant(&sr.eigenvalues, truncation_tol)?;
    if !sr.converged {
        return Err(Error::NonConvergence {
            iterations: sr.restarts,
            message: "eigenpairs did not converge".into(),
        });
    }
    if !det.tail_converged {
        return Err(Error::NonConvergence {
            iterations: sr.eigenvalues.len(),
            message: format!(
                "partial products still moving (relative change {:.2e}); request more eigenvalues",
                det.plateau_change
            ),
        });
    }
    let value = prefactor_from_determinant(instanton.rate, det.det)?;
    Ok((value, det))
}

pub fn prefactor_from_determinant(rate: f64, det: f64) -> Result<f64> {
    if !(det > 0.0) {
        return Err(Error::AssumptionViolation(format!("det(Id − A_z) = {det} is not positive")));
    }
    if !(rate > 0.0) {
        return Err(Error::InvalidArgument(format!("rate must be positive, got {rate}")));
    }
    Ok(1.0 / (2.0 * rate * det).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub z: f64,
    pub eps: Vec<f64>,
    pub rate: f64,
    pub lambda: f64,
    pub prefactor_fredholm: f64,
    pub prefactor_riccati: Option<f64>,
    pub tail: Vec<LogValue>,
    pub pdf: Vec<LogValue>,
    pub determinant: FredholmDeterminant,
}

impl EstimateReport {
    pub fn new(
        instanton: &InstantonResult,
        prefactor_fredholm: f64,
        determinant: FredholmDeterminant,
        prefactor_riccati: Option<f64>,
        eps: &[f64],
    ) -> Result<Self> {
        let tail = eps
            .iter()
            .map(|&e| tail_probability(instanton.rate, prefactor_fredholm, e))
            .collect::<Result<Vec<_>>>()?;
        let pdf = eps
            .iter()
            .map(|&e| pdf_estimate(instanton.rate, instanton.lambda, prefactor_fredholm, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            z: instanton.z,
            eps: eps.to_vec(),
            rate: instanton.rate,
            lambda: instanton.lambda,
            prefactor_fredholm,
            prefactor_riccati,
            tail,
            pdf,
            determinant,
        })
    }
}

/// Smooth scalar map on `ℝ^N` with the Euclidean inner product.
pub trait SmoothFunctional: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Dense Hessian. The default uses central differences of the gradient.
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let h = 1e-5 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt());
        let mut out = DMatrix::zeros(n, n);
        let mut y = x.to_vec();
        for j in 0..n {
            y[j] = x[j] + h;
            let gp = self.gradient(&y)?;
            y[j] = x[j] - h;
            let gm = self.gradient(&y)?;
            y[j] = x[j];
            for i in 0..n {
                out[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        Ok((&out + out.transpose()) * 0.5)
    }
}

/// The discretized path objective in coordinates `ξ = W^{1/2} η`, where
/// the weighted inner product becomes Euclidean.
pub struct DiscretePathFunctional<'a> {
    spec: &'a dyn ProblemSpec,
    grid: Arc<TimeGrid>,
    integrator: IntegratorConfig,
    sqrt_w: Vec<f64>,
}

impl<'a> DiscretePathFunctional<'a> {
    pub fn new(spec: &'a dyn ProblemSpec, grid: Arc<TimeGrid>, integrator: IntegratorConfig) -> Self {
        let r = spec.noise_rank();
        let sqrt_w = grid
            .weights()
            .iter()
            .flat_map(|w| std::iter::repeat(w.sqrt()).take(r))
            .collect();
        Self {
            spec,
            grid,
            integrator,
            sqrt_w,
        }
    }

    pub fn to_path(&self, xi: &[f64]) -> Result<Path> {
        let v = xi.iter().zip(&self.sqrt_w).map(|(x, s)| x / s).collect();
        Path::from_values(self.grid.clone(), self.spec.noise_rank(), v)
    }

    pub fn from_path(&self, eta: &Path) -> Vec<f64> {
        eta.values().iter().zip(&self.sqrt_w).map(|(x, s)| x * s).collect()
    }
}

impl SmoothFunctional for DiscretePathFunctional<'_> {
    fn dim(&self) -> usize {
        self.sqrt_w.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        propagate::observable_of(self.spec, &self.to_path(x)?, &self.integrator)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let g = propagate::gradient(self.spec, &self.to_path(x)?, 1.0, &self.integrator)?;
        Ok(self.from_path(&g))
    }
}

#[derive(Debug, Clone)]
pub struct SormResult {
    pub x: Vec<f64>,
    pub rate: f64,
    pub lambda: f64,
    /// Eigenvalues of `λ P ∇²F P`, descending magnitude.
    pub eigenvalues: Vec<f64>,
    pub determinant: f64,
    pub prefactor: f64,
    pub iterations: usize,
}

impl SormResult {
    pub fn tail(&self, eps: f64) -> Result<LogValue> {
        tail_probability(self.rate, self.prefactor, eps)
    }
}

/// Dense Laplace evaluation of `P(F(X) ≥ z)` for `X ~ N(0, ε I_N)`.
///
/// Finds the design point of `min ½|x|²` subject to `F(x) = z` with
/// Hasofer–Lind iterations followed by Newton steps on the optimality
/// system, then forms `det(1 − λ P ∇²F P)` by dense eigendecomposition.
pub fn finite_dim_sorm(f: &dyn SmoothFunctional, z: f64, start: Option<&[f64]>, tol: f64) -> Result<SormResult> {
    let n = f.dim();
    let mut x = DVector::from_column_slice(start.unwrap_or(&vec![0.0; n]));
    if x.len() != n {
        return Err(Error::Dimension("start point length".into()));
    }
    let grad = |x: &DVector<f64>| f.gradient(x.as_slice()).map(DVector::from_vec);
    let mut lambda = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    // Hasofer–Lind: x ← λ∇F with λ fixing the linearized constraint.
    for _ in 0..200 {
        iterations += 1;
        let g = grad(&x)?;
        let gg = g.norm_squared();
        if gg == 0.0 {
            return Err(Error::AssumptionViolation("vanishing gradient of F".into()));
        }
        lambda = (z - f.value(x.as_slice())? + g.dot(&x)) / gg;
        let next = &g * lambda;
        let step = (&next - &x).norm();
        x = next;
        if step <= 1e-6 * x.norm().max(1.0) {
            break;
        }
    }
    // Newton on [x − λ∇F = 0, F = z].
    for _ in 0..50 {
        iterations += 1;
        let g = grad(&x)?;
        let res_x = &x - &g * lambda;
        let res_c = f.value(x.as_slice())? - z;
        if res_x.norm() <= tol * x.norm().max(1.0) && res_c.abs() <= tol * z.abs().max(1.0) {
            converged = true;
            break;
        }
        let h = f.hessian(x.as_slice())?;
        let mut k = DMatrix::zeros(n + 1, n + 1);
        k.view_mut((0, 0), (n, n)).copy_from(&(DMatrix::identity(n, n) - &h * lambda));
        k.view_mut((0, n), (n, 1)).copy_from(&(-&g));
        k.view_mut((n, 0), (1, n)).copy_from(&g.transpose());
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(&(-res_x));
        rhs[n] = -res_c;
        let d = k
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::AssumptionViolation("singular optimality system".into()))?;
        x += d.rows(0, n);
        lambda += d[n];
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            message: "design point iteration stalled".into(),
        });
    }
    let xn2 = x.norm_squared();
    let h = f.hessian(x.as_slice())?;
    let p = DMatrix::identity(n, n) - &x * x.transpose() / xn2;
    let a = &p * h * &p * lambda;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new((&a + a.transpose()) * 0.5).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    if let Some(mu) = eigenvalues.iter().find(|&&mu| mu >= 1.0) {
        return Err(Error::AssumptionViolation(format!(
            "projected Hessian eigenvalue {mu} >= 1: design point is not a local minimizer"
        )));
    }
    let determinant: f64 = eigenvalues.iter().map(|mu| 1.0 - mu).product();
    let rate = 0.5 * xn2;
    Ok(SormResult {
        prefactor: prefactor_from_determinant(rate, determinant)?,
        x: x.iter().copied().collect(),
        rate,
        lambda,
        eigenvalues,
        determinant,
        iterations,
    })
}
