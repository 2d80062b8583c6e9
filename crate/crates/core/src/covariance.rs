//! Conditioned Gaussian fluctuations around the instanton (the transition
//! tube).
//!
//! The covariance is the mode sum `C(t,t') = Σ γ_i(t) γ_i(t')ᵀ / (1 − μ_i)`
//! over an orthonormal eigenbasis of `A_z` on `η_z^⊥`. Writing
//! `1/(1 − μ) = 1 + μ/(1 − μ)`, the unit part sums to the full linear
//! response covariance `K` minus the instanton direction, which is computed
//! exactly by a discrete Lyapunov recursion. Only the correction
//! `Σ μ_i/(1 − μ_i) γ_i γ_iᵀ` is truncated, and it converges as fast as the
//! eigenvalues decay.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instanton::InstantonResult;
use crate::path::Path;
use crate::problem::ProblemSpec;
use crate::propagate::{self, scheme::Stepper, Forcing};
use crate::rng::{sample_rng, standard_normal};
use crate::spectrum::SpectrumResult;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeConfig {
    /// Keep tube data every `stride` nodes (the final node is always kept).
    /// `None` keeps every node when that costs at most 5e7 numbers.
    pub stride: Option<usize>,
}

impl Default for TubeConfig {
    fn default() -> Self {
        Self { stride: None }
    }
}

#[derive(Debug, Clone)]
pub struct TubeMode {
    pub mu: f64,
    /// `1 / (1 − μ)`
    pub weight: f64,
    /// `γ(t)` at the stored nodes.
    pub gamma: Vec<DVector<f64>>,
    /// `|⟨∇f, γ(T)⟩| / (‖∇f‖ ‖γ(T)‖)`
    pub boundary_defect: f64,
}

pub struct TubeModel<'a> {
    spec: &'a dyn ProblemSpec,
    instanton: &'a InstantonResult,
    stored: Vec<usize>,
    /// Response covariance of noise entering before node `j`, at node `j`.
    p: Vec<DMatrix<f64>>,
    /// Response to the noise at node `j` itself (`n × r`, scaled by `w_j^{-1/2}`).
    gam: Vec<DMatrix<f64>>,
    /// Response to `η_z / ‖η_z‖`.
    ke: Vec<DVector<f64>>,
    pub modes: Vec<TubeMode>,
}

fn sigma_matrix(spec: &dyn ProblemSpec) -> DMatrix<f64> {
    let (n, r) = (spec.state_dim(), spec.noise_rank());
    let mut s = DMatrix::zeros(n, r);
    let mut e = vec![0.0; r];
    let mut col = vec![0.0; n];
    for c in 0..r {
        e.fill(0.0);
        e[c] = 1.0;
        spec.sigma_apply(&e, &mut col);
        s.column_mut(c).copy_from_slice(&col);
    }
    s
}

impl<'a> TubeModel<'a> {
    /// Applies one linearized step to every column of `g`, with optional
    /// forcing columns for the left and right noise node.
    fn step_columns(&self, i: usize, g: &DMatrix<f64>, dsa: Option<&DMatrix<f64>>, dsb: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let inst = self.instanton;
        let n = g.nrows();
        let h = inst.grid().step(i);
        let x = inst.phi.node(i);
        let mut sa = vec![0.0; n];
        Forcing::new(self.spec, &inst.eta).at(i, &mut sa);
        let zero = vec![0.0; n];
        let mut out = DMatrix::zeros(n, g.ncols());
        out.as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .for_each_init(
                || Stepper::new(self.spec, &inst.integrator),
                |st, (c, o)| {
                    let a = dsa.map_or(&zero[..], |m| &m.as_slice()[c * n..(c + 1) * n]);
                    let b = dsb.map_or(&zero[..], |m| &m.as_slice()[c * n..(c + 1) * n]);
                    st.tangent(h, x, &g.as_slice()[c * n..(c + 1) * n], &sa, a, b, o);
                },
            );
        out
    }

    fn slot(&self, node: usize) -> Result<usize> {
        self.stored
            .binary_search(&node)
            .map_err(|_| Error::InvalidArgument(format!("node {node} is not stored in the tube")))
    }

    pub fn instanton(&self) -> &InstantonResult {
        self.instanton
    }

    pub fn stored_nodes(&self) -> &[usize] {
        &self.stored
    }

    /// Exact response covariance `K(t_a, t_b)`, `a ≤ b`.
    fn response(&self, a: usize, b: usize) -> Result<DMatrix<f64>> {
        let (sa, sb) = (self.slot(a)?, self.slot(b)?);
        let (p, g) = (&self.p[sa], &self.gam[sa]);
        if a == b {
            return Ok(p + g * g.transpose());
        }
        let n = p.nrows();
        let r = g.ncols();
        let w = self.instanton.grid().weights();
        let sig = sigma_matrix(self.spec) / w[a].sqrt();
        let mut x = DMatrix::zeros(n, n + r);
        x.view_mut((0, 0), (n, n)).copy_from(p);
        x.view_mut((0, n), (n, r)).copy_from(g);
        let mut force = DMatrix::zeros(n, n + r);
        force.view_mut((0, n), (n, r)).copy_from(&sig);
        x = self.step_columns(a, &x, Some(&force), None);
        for i in a + 1..b {
            x = self.step_columns(i, &x, None, None);
        }
        debug_assert_eq!(sb, self.slot(b)?);
        Ok(x.columns(0, n).into_owned() + x.columns(n, r) * g.transpose())
    }

    /// `C(t_a, t_b)` at stored node indices.
    pub fn covariance_nodes(&self, a: usize, b: usize) -> Result<DMatrix<f64>> {
        if a > b {
            return Ok(self.covariance_nodes(b, a)?.transpose());
        }
        let (sa, sb) = (self.slot(a)?, self.slot(b)?);
        let mut c = self.response(a, b)? - &self.ke[sb] * self.ke[sa].transpose();
        for m in &self.modes {
            c += &m.gamma[sb] * m.gamma[sa].transpose() * (m.mu * m.weight);
        }
        if a == b {
            c = (&c + c.transpose()) * 0.5;
        }
        Ok(c)
    }

    /// `C(t, t')`; both times must be stored nodes.
    pub fn covariance_at(&self, t: f64, t2: f64) -> Result<DMatrix<f64>> {
        self.covariance_nodes(self.node_of(t)?, self.node_of(t2)?)
    }

    /// The plain truncated sum over the first `m` modes, for diagnostics.
    pub fn truncated_covariance_nodes(&self, a: usize, b: usize, m: usize) -> Result<DMatrix<f64>> {
        let (sa, sb) = (self.slot(a)?, self.slot(b)?);
        let n = self.spec.state_dim();
        let mut c = DMatrix::zeros(n, n);
        for mode in self.modes.iter().take(m) {
            c += &mode.gamma[sb] * mode.gamma[sa].transpose() * mode.weight;
        }
        Ok(c)
    }

    fn node_of(&self, t: f64) -> Result<usize> {
        let grid = self.instanton.grid();
        let i = grid.nearest_node(t);
        if (grid.nodes()[i] - t).abs() > 1e-9 * grid.horizon() {
            return Err(Error::InvalidArgument(format!("time {t} is not a grid node")));
        }
        self.slot(i)?;
        Ok(i)
    }

    /// `(φ_z(t), ε C(t,t))`
    pub fn tube_marginal(&self, t: f64, eps: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("noise strength must be positive, got {eps}")));
        }
        let i = self.node_of(t)?;
        let mean = DVector::from_column_slice(self.instanton.phi.node(i));
        Ok((mean, self.covariance_nodes(i, i)? * eps))
    }

    /// Draws `φ_z(T) + √ε Σ Z_i √ν_i v_i` with `(ν_i, v_i)` the eigenpairs of
    /// `C(T,T)`. Sample `k` uses its own random stream.
    pub fn sample_tube_endpoint(&self, eps: f64, seed: u64, count: usize) -> Result<Vec<DVector<f64>>> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("noise strength must be positive, got {eps}")));
        }
        let last = self.instanton.grid().n_intervals();
        let n = self.spec.state_dim();
        let mut g = vec![0.0; n];
        self.spec.observable_gradient(self.instanton.phi.last(), &mut g);
        let g = DVector::from_vec(g);
        // Fluctuations live in the tangent plane of the constraint surface;
        // enforce it exactly rather than to instanton accuracy.
        let proj = DMatrix::identity(n, n) - &g * g.transpose() / g.norm_squared();
        let c = &proj * self.covariance_nodes(last, last)? * &proj;
        let eig = SymmetricEigen::new((&c + c.transpose()) * 0.5);
        let top = eig.eigenvalues.amax();
        let scale: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|&v| if v > 1e-12 * top { (eps * v).sqrt() } else { 0.0 })
            .collect();
        let mean = DVector::from_column_slice(self.instanton.phi.last());
        Ok((0..count)
            .into_par_iter()
            .map(|k| {
                let mut rng = sample_rng(seed, k as u64);
                let mut x = mean.clone();
                for (i, s) in scale.iter().enumerate() {
                    let z = standard_normal(&mut rng);
                    if *s > 0.0 {
                        x.axpy(s * z, &eig.eigenvectors.column(i), 1.0);
                    }
                }
                x
            })
            .collect())
    }

    /// Eigenvalues of `C(T,T)`, descending.
    pub fn final_covariance_spectrum(&self) -> Result<Vec<f64>> {
        let last = self.instanton.grid().n_intervals();
        let mut v: Vec<f64> = SymmetricEigen::new(self.covariance_nodes(last, last)?)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        v.sort_by(|a, b| b.total_cmp(a));
        Ok(v)
    }
}

pub fn build_tube<'a>(
    spec: &'a dyn ProblemSpec,
    instanton: &'a InstantonResult,
    sr: &SpectrumResult,
    cfg: &TubeConfig,
) -> Result<TubeModel<'a>> {
    let n = spec.state_dim();
    let r = spec.noise_rank();
    let grid = instanton.grid().clone();
    let nt = grid.n_intervals();
    if let Some(v) = sr.eigenvectors.first() {
        if !v.grid().same_as(&grid) {
            return Err(Error::Dimension("eigenvectors live on a different grid".into()));
        }
    }
    if let Some(mu) = sr.eigenvalues.iter().find(|&&mu| mu >= 1.0) {
        return Err(Error::AssumptionViolation(format!("eigenvalue {mu} >= 1")));
    }
    let stride = match cfg.stride {
        Some(0) => return Err(Error::InvalidArgument("stride must be positive".into())),
        Some(s) => s,
        None => {
            let per_node = (n * n + n * (r + 1 + sr.eigenvalues.len())) as f64;
            ((per_node * (nt + 1) as f64 / 5e7).ceil() as usize).max(1)
        }
    };
    let mut stored: Vec<usize> = (0..=nt).step_by(stride).collect();
    if *stored.last().unwrap() != nt {
        stored.push(nt);
    }
    let mut tm = TubeModel {
        spec,
        instanton,
        stored,
        p: Vec::new(),
        gam: Vec::new(),
        ke: Vec::new(),
        modes: Vec::new(),
    };

    // Discrete Lyapunov recursion for the response covariance.
    let w = grid.weights();
    let sig = sigma_matrix(spec);
    let mut p = DMatrix::zeros(n, n);
    let mut g = DMatrix::zeros(n, r);
    let mut next_slot = 0;
    for j in 0..=nt {
        if tm.stored[next_slot] == j {
            tm.p.push(p.clone());
            tm.gam.push(g.clone());
            next_slot = (next_slot + 1).min(tm.stored.len() - 1);
        }
        if j == nt {
            break;
        }
        let ap = tm.step_columns(j, &p, None, None);
        let mut pn = tm.step_columns(j, &ap.transpose(), None, None);
        let gs = tm.step_columns(j, &g, Some(&(&sig / w[j].sqrt())), None);
        pn += &gs * gs.transpose();
        p = (&pn + pn.transpose()) * 0.5;
        g = tm.step_columns(j, &DMatrix::zeros(n, r), None, Some(&(&sig / w[j + 1].sqrt())));
    }

    let stored_of = |path: &Path| -> Vec<DVector<f64>> {
        tm.stored.iter().map(|&i| DVector::from_column_slice(path.node(i))).collect()
    };
    let mut unit = instanton.eta.clone();
    unit.scale(1.0 / instanton.eta.norm());
    let ke = propagate::solve_linearized_state(spec, &instanton.eta, &instanton.phi, &unit, &instanton.integrator)?;
    tm.ke = stored_of(&ke);

    let mut grad = vec![0.0; n];
    spec.observable_gradient(instanton.phi.last(), &mut grad);
    let gn = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let modes = sr
        .eigenvectors
        .par_iter()
        .zip(&sr.eigenvalues)
        .map(|(v, &mu)| {
            let gamma = propagate::solve_linearized_state(spec, &instanton.eta, &instanton.phi, v, &instanton.integrator)?;
            let end = gamma.last();
            let en = end.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = end.iter().zip(&grad).map(|(a, b)| a * b).sum();
            Ok(TubeMode {
                mu,
                weight: 1.0 / (1.0 - mu),
                gamma: stored_of(&gamma),
                boundary_defect: if en * gn > 0.0 { dot.abs() / (en * gn) } else { 0.0 },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    tm.modes = modes;
    Ok(tm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instanton::{solve_instanton, InstantonConfig};
    use crate::problems::{make_model2d, make_ou};
    use crate::propagate::IntegratorConfig;
    use crate::riccati::{final_time_covariance_riccati, solve_riccati, RiccatiConfig};
    use crate::second_variation::SecondVariationOperator;
    use crate::spectrum::{dominant_eigenpairs, SpectrumConfig};

    fn setup2d(nt: usize, m: usize, integrator: IntegratorConfig) -> (crate::problems::Model2d, InstantonResult, SpectrumResult) {
        let spec = make_model2d();
        let inst = solve_instanton(
            &spec,
            &InstantonConfig {
                z_target: 3.0,
                n_t: nt,
                integrator,
                ..Default::default()
            },
        )
        .unwrap();
        let sr = {
            let op = SecondVariationOperator::new(&spec, &inst).unwrap();
            dominant_eigenpairs(&op, m, &SpectrumConfig::default()).unwrap()
        };
        (spec, inst, sr)
    }

    #[test]
    fn completion_equals_full_mode_sum() {
        // With every eigenvector of η^⊥ the plain sum is exact.
        let (spec, inst, sr) = setup2d(40, 81, IntegratorConfig::euler());
        let tm = build_tube(&spec, &inst, &sr, &TubeConfig::default()).unwrap();
        for (a, b) in [(40, 40), (10, 30), (25, 25), (35, 5)] {
            let c = tm.covariance_nodes(a, b).unwrap();
            let naive = tm.truncated_covariance_nodes(a, b, 81).unwrap();
            assert!((&c - &naive).norm() <= 1e-10 * c.norm().max(1e-3), "{a} {b}");
        }
        assert_eq!(tm.covariance_nodes(0, 0).unwrap().norm(), 0.0);
    }

    #[test]
    fn matches_riccati_final_covariance() {
        let (spec, inst, sr) = setup2d(1000, 60, IntegratorConfig::rk2());
        let tm = build_tube(&spec, &inst, &sr, &TubeConfig { stride: Some(50) }).unwrap();
        let c = tm.covariance_nodes(1000, 1000).unwrap();
        let rr = solve_riccati(&spec, &inst, &RiccatiConfig::default()).unwrap();
        let cr = final_time_covariance_riccati(&rr).unwrap();
        let rel = (&c - &cr).norm() / cr.norm();
        assert!(rel < 1e-4, "{rel}");
        for m in &tm.modes {
            assert!(m.boundary_defect < 1e-8, "{}", m.boundary_defect);
        }
        let g = DVector::from_vec(vec![1.0, 2.0]);
        assert!((&c * &g).norm() <= 1e-10 * c.norm() * g.norm());
    }

    #[test]
    fn truncated_sum_is_monotone() {
        let (spec, inst, sr) = setup2d(200, 30, IntegratorConfig::euler());
        let tm = build_tube(&spec, &inst, &sr, &TubeConfig::default()).unwrap();
        let mut prev = 0.0;
        for m in 1..=30 {
            let c = tm.truncated_covariance_nodes(200, 200, m).unwrap().norm();
            let g = &tm.modes[m - 1].gamma.last().unwrap();
            assert!(c >= prev - 1e-14);
            assert!(c - prev <= g.norm_squared() * tm.modes[m - 1].weight + 1e-14);
            prev = c;
        }
    }

    #[test]
    fn ou_tube_collapses_at_the_end() {
        let ou = make_ou(1.0, 1.0).unwrap();
        let inst = solve_instanton(
            &ou,
            &InstantonConfig {
                z_target: 1.0,
                n_t: 200,
                ..Default::default()
            },
        )
        .unwrap();
        let op = SecondVariationOperator::new(&ou, &inst).unwrap();
        let sr = dominant_eigenpairs(&op, 3, &SpectrumConfig::default()).unwrap();
        let tm = build_tube(&ou, &inst, &sr, &TubeConfig::default()).unwrap();
        assert!(tm.modes.iter().all(|m| m.weight == 1.0));
        assert!(tm.covariance_nodes(200, 200).unwrap()[(0, 0)].abs() < 1e-12);
        let mid = tm.covariance_nodes(100, 100).unwrap()[(0, 0)];
        assert!(mid > 0.05);
        let samples = tm.sample_tube_endpoint(0.1, 1, 100).unwrap();
        assert!(samples.iter().all(|s| (s[0] - inst.phi.last()[0]).abs() < 1e-6));
    }

    #[test]
    fn endpoint_samples_respect_constraint_and_mean() {
        let (spec, inst, sr) = setup2d(200, 40, IntegratorConfig::rk2());
        let tm = build_tube(&spec, &inst, &sr, &TubeConfig::default()).unwrap();
        let eps = 0.5;
        let count = 20_000;
        let s = tm.sample_tube_endpoint(eps, 7, count).unwrap();
        assert_eq!(s, tm.sample_tube_endpoint(eps, 7, count).unwrap());
        let end = DVector::from_column_slice(inst.phi.last());
        let g = DVector::from_vec(vec![1.0, 2.0]);
        let c = tm.covariance_nodes(200, 200).unwrap() * eps;
        let mut mean = DVector::zeros(2);
        for x in &s {
            assert!(g.dot(&(x - &end)).abs() < 1e-10);
            mean += x;
        }
        mean /= count as f64;
        for k in 0..2 {
            let se = (c[(k, k)] / count as f64).sqrt();
            assert!((mean[k] - end[k]).abs() <= 4.0 * se + 1e-12);
        }
        let (mu, cov) = tm.tube_marginal(1.0, eps).unwrap();
        assert_eq!(mu, end);
        assert!((cov - c).norm() < 1e-15);
        assert!(tm.tube_marginal(0.5, 0.0).is_err());
    }
}
