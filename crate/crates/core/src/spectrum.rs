//! Dominant eigenpairs of the projected second variation and the
//! Fredholm determinant `det(Id − A_z) = Π (1 − μ_i)`.
//!
//! Lanczos with full reorthogonalization and thick restarts. The Krylov
//! space is built in the weighted geometry of the time grid and kept
//! orthogonal to the instanton noise, so the trivial kernel direction never
//! enters the Ritz problem.

use nalgebra::{DMatrix, DMatrixView, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::Path;
use crate::second_variation::SecondVariationOperator;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    /// Residual tolerance, relative to `max(1, |μ|)`.
    pub tol: f64,
    pub max_restarts: usize,
    pub seed: u64,
    /// Largest Krylov basis; `None` picks `max(2m, m + 32)`.
    pub basis_size: Option<usize>,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_restarts: 50,
            seed: 0x5eed,
            basis_size: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpectrumResult {
    /// Sorted by descending magnitude.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Path>,
    /// `Π_{i≤k} (1 − μ_i)` for `k = 1..m`.
    pub partial_products: Vec<f64>,
    /// Ritz residual norms `‖A v − μ v‖`.
    pub residuals: Vec<f64>,
    pub matvec_count: usize,
    pub restarts: usize,
    pub seed: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FredholmDeterminant {
    pub det: f64,
    /// Eigenvalues that entered the product.
    pub k_used: usize,
    /// `|μ_m| ≤ truncation_tol · |μ_1|` or the partial products have
    /// plateaued (see [`PLATEAU_TOL`]).
    pub tail_converged: bool,
    /// `|Π_m − Π_{⌈m/2⌉}| / |Π_m|`
    pub plateau_change: f64,
}

/// Relative change of the partial products over the second half of the
/// computed spectrum below which the tail counts as converged.
pub const PLATEAU_TOL: f64 = 1e-3;

/// Self-adjoint operator on `ℝ^N` with the inner product `Σ w_k x_k y_k`.
pub(crate) trait KrylovOperator {
    fn weights(&self) -> &[f64];
    /// Direction the Krylov space must stay orthogonal to.
    fn deflation(&self) -> Option<&[f64]>;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
}

struct PathOperator<'o, 'a> {
    op: &'o SecondVariationOperator<'a>,
    weights: Vec<f64>,
}

impl<'o, 'a> PathOperator<'o, 'a> {
    fn new(op: &'o SecondVariationOperator<'a>) -> Self {
        let eta = &op.instanton().eta;
        let r = eta.width();
        let weights = eta.grid().weights().iter().flat_map(|&w| std::iter::repeat(w).take(r)).collect();
        Self { op, weights }
    }

    fn path(&self, x: &[f64]) -> Result<Path> {
        let eta = &self.op.instanton().eta;
        Path::from_values(eta.grid().clone(), eta.width(), x.to_vec())
    }
}

impl KrylovOperator for PathOperator<'_, '_> {
    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn deflation(&self) -> Option<&[f64]> {
        Some(self.op.instanton().eta.values())
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.op.apply(&self.path(x)?)?.into_values())
    }
}

pub(crate) struct RawSpectrum {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub matvecs: usize,
    pub restarts: usize,
    pub converged: bool,
}

/// Weighted Krylov basis stored column by column.
struct Basis<'w> {
    w: &'w [f64],
    n: usize,
    cols: Vec<f64>,
    len: usize,
    defl: Option<Vec<f64>>,
}

impl<'w> Basis<'w> {
    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
    }

    fn norm(&self, a: &[f64]) -> f64 {
        self.dot(a, a).sqrt()
    }

    fn col(&self, i: usize) -> &[f64] {
        &self.cols[i * self.n..(i + 1) * self.n]
    }

    fn push(&mut self, x: &[f64]) {
        self.cols.extend_from_slice(x);
        self.len += 1;
    }

    fn view(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.cols[..self.n * self.len], self.n, self.len)
    }

    /// Two passes of classical Gram–Schmidt against the basis and the
    /// deflation direction. Returns the accumulated basis coefficients.
    fn orthogonalize(&self, x: &mut [f64]) -> Vec<f64> {
        let mut coeffs = vec![0.0; self.len];
        for _ in 0..2 {
            if let Some(u) = &self.defl {
                let c = self.dot(u, x);
                x.iter_mut().zip(u).for_each(|(x, u)| *x -= c * u);
            }
            if self.len == 0 {
                continue;
            }
            let wx = DVector::from_iterator(self.n, self.w.iter().zip(x.iter()).map(|(w, x)| w * x));
            let h = self.view().tr_mul(&wx);
            let corr = self.view() * &h;
            x.iter_mut().zip(corr.iter()).for_each(|(x, c)| *x -= c);
            coeffs.iter_mut().zip(h.iter()).for_each(|(c, h)| *c += h);
        }
        coeffs
    }
}

fn random_unit(basis: &Basis<'_>, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    for _ in 0..8 {
        let mut x: Vec<f64> = (0..basis.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let before = basis.norm(&x);
        basis.orthogonalize(&mut x);
        let nrm = basis.norm(&x);
        if nrm > 1e-8 * before {
            x.iter_mut().for_each(|v| *v /= nrm);
            return Some(x);
        }
    }
    None
}

pub(crate) fn lanczos(op: &dyn KrylovOperator, m: usize, cfg: &SpectrumConfig) -> Result<RawSpectrum> {
    let w = op.weights();
    let n = w.len();
    if w.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::InvalidArgument("weights must be positive".into()));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", cfg.tol)));
    }
    let mut basis = Basis {
        w,
        n,
        cols: Vec::new(),
        len: 0,
        defl: None,
    };
    if let Some(d) = op.deflation() {
        if d.len() != n {
            return Err(Error::Dimension("deflation vector length".into()));
        }
        let nrm = basis.norm(d);
        if !(nrm > 0.0) {
            return Err(Error::SingularInstanton);
        }
        basis.defl = Some(d.iter().map(|v| v / nrm).collect());
    }
    let dim = n - usize::from(basis.defl.is_some());
    if m == 0 || m > dim {
        return Err(Error::InvalidArgument(format!(
            "requested {m} eigenpairs in a space of dimension {dim}"
        )));
    }
    let p = cfg.basis_size.unwrap_or((2 * m).max(m + 32)).max(m + 1).min(dim);
    basis.cols.reserve(n * p);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = random_unit(&basis, &mut rng).ok_or_else(|| Error::InvalidArgument("degenerate start".into()))?;
    basis.push(&start);

    let mut t = DMatrix::<f64>::zeros(p, p);
    let mut matvecs = 0;
    let mut scale: f64 = 0.0;
    let mut restarts = 0;
    loop {
        // Expand to p vectors; `resid` ends up orthogonal to all of them.
        let mut resid;
        let mut beta;
        loop {
            let j = basis.len - 1;
            let mut wv = op.apply(basis.col(j))?;
            matvecs += 1;
            if wv.len() != n {
                return Err(Error::Dimension("operator output length".into()));
            }
            let h = basis.orthogonalize(&mut wv);
            for (i, &hi) in h.iter().enumerate() {
                t[(i, j)] = hi;
                t[(j, i)] = hi;
                scale = scale.max(hi.abs());
            }
            beta = basis.norm(&wv);
            resid = wv;
            if basis.len == p {
                break;
            }
            if beta <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
                // Invariant subspace; continue with a fresh direction.
                beta = 0.0;
                match random_unit(&basis, &mut rng) {
                    Some(x) => basis.push(&x),
                    None => break,
                }
            } else {
                resid.iter_mut().for_each(|v| *v /= beta);
                basis.push(&resid);
                t[(j + 1, j)] = beta;
                t[(j, j + 1)] = beta;
            }
        }

        let k = basis.len;
        let eig = SymmetricEigen::new(t.view((0, 0), (k, k)).into_owned());
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].abs().total_cmp(&eig.eigenvalues[a].abs()));
        let ritz_resid = |i: usize| beta * eig.eigenvectors[(k - 1, i)].abs();
        let wanted = m.min(k);
        let done = order[..wanted]
            .iter()
            .all(|&i| ritz_resid(i) <= cfg.tol * eig.eigenvalues[i].abs().max(1.0));
        let exhausted = k == dim || beta == 0.0 && k < p;

        if done || exhausted || restarts >= cfg.max_restarts {
            let sel = DMatrix::from_fn(k, wanted, |r, c| eig.eigenvectors[(r, order[c])]);
            let y = basis.view() * sel;
            return Ok(RawSpectrum {
                values: order[..wanted].iter().map(|&i| eig.eigenvalues[i]).collect(),
                vectors: (0..wanted).map(|c| y.column(c).iter().copied().collect()).collect(),
                residuals: order[..wanted].iter().map(|&i| ritz_resid(i)).collect(),
                matvecs,
                restarts,
                converged: done || exhausted,
            });
        }

        // Thick restart: keep the leading Ritz vectors plus the residual.
        restarts += 1;
        let keep = ((m + p) / 2).clamp(m, p - 1);
        let sel = DMatrix::from_fn(k, keep, |r, c| eig.eigenvectors[(r, order[c])]);
        let y = basis.view() * sel;
        basis.cols.clear();
        basis.cols.extend_from_slice(y.as_slice());
        basis.len = keep;
        t.fill(0.0);
        for c in 0..keep {
            t[(c, c)] = eig.eigenvalues[order[c]];
            let b = beta * eig.eigenvectors[(k - 1, order[c])];
            t[(keep, c)] = b;
            t[(c, keep)] = b;
        }
        // `resid` was normalized only if it joined the basis.
        let rn = basis.norm(&resid);
        resid.iter_mut().for_each(|v| *v /= rn);
        basis.push(&resid);
    }
}

/// The `m` largest-magnitude eigenpairs of `A_z`.
///
/// Returns a flagged partial result if `max_restarts` is exhausted.
pub fn dominant_eigenpairs(op: &SecondVariationOperator<'_>, m: usize, cfg: &SpectrumConfig) -> Result<SpectrumResult> {
    let pop = PathOperator::new(op);
    let raw = lanczos(&pop, m, cfg)?;
    let eigenvectors = raw.vectors.iter().map(|v| pop.path(v)).collect::<Result<Vec<_>>>()?;
    let mut acc = 1.0;
    let partial_products = raw
        .values
        .iter()
        .map(|mu| {
            acc *= 1.0 - mu;
            acc
        })
        .collect();
    Ok(SpectrumResult {
        eigenvalues: raw.values,
        eigenvectors,
        partial_products,
        residuals: raw.residuals,
        matvec_count: raw.matvecs,
        restarts: raw.restarts,
        seed: cfg.seed,
        converged: raw.converged,
    })
}

/// `Π (1 − μ_i)` over eigenvalues with `|μ_i| > truncation_tol · |μ_1|`.
pub fn fredholm_determinant(eigenvalues: &[f64], truncation_tol: f64) -> Result<FredholmDeterminant> {
    let (first, last) = match (eigenvalues.first(), eigenvalues.last()) {
        (Some(f), Some(l)) => (f.abs(), l.abs()),
        _ => return Err(Error::InvalidArgument("empty spectrum".into())),
    };
    if let Some(mu) = eigenvalues.iter().find(|&&mu| mu >= 1.0) {
        return Err(Error::AssumptionViolation(format!(
            "eigenvalue {mu} >= 1: Id − A_z is not positive definite"
        )));
    }
    let cut = truncation_tol * first;
    let used: Vec<f64> = eigenvalues.iter().copied().filter(|mu| mu.abs() > cut).collect();
    let det: f64 = used.iter().map(|mu| 1.0 - mu).product();
    let half: f64 = eigenvalues[..eigenvalues.len().div_ceil(2)].iter().map(|mu| 1.0 - mu).product();
    let full: f64 = eigenvalues.iter().map(|mu| 1.0 - mu).product();
    let plateau_change = if eigenvalues.len() < 2 { f64::INFINITY } else { ((full - half) / full).abs() };
    Ok(FredholmDeterminant {
        det,
        k_used: used.len(),
        tail_converged: last <= cut || plateau_change <= PLATEAU_TOL,
        plateau_change,
    })
}

/// Symmetric matrix `W^{1/2} A_z W^{-1/2}` assembled by applying the
/// operator to every basis path. Meant for small grids.
pub fn assemble_dense(op: &SecondVariationOperator<'_>) -> Result<DMatrix<f64>> {
    let pop = PathOperator::new(op);
    let n = pop.weights.len();
    let sw: Vec<f64> = pop.weights.iter().map(|w| w.sqrt()).collect();
    let mut a = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0 / sw[j];
        let col = pop.apply(&e)?;
        e[j] = 0.0;
        for i in 0..n {
            a[(i, j)] = sw[i] * col[i];
        }
    }
    Ok(a)
}

/// All eigenvalues of a dense symmetric matrix, sorted by descending
/// magnitude.
pub fn dense_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let mut v: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instanton::{solve_instanton, InstantonConfig, InstantonResult};
    use crate::problems::{make_model2d, make_ou};
    use crate::propagate::IntegratorConfig;

    struct Diagonal {
        w: Vec<f64>,
        d: Vec<f64>,
        defl: Option<Vec<f64>>,
    }

    impl KrylovOperator for Diagonal {
        fn weights(&self) -> &[f64] {
            &self.w
        }
        fn deflation(&self) -> Option<&[f64]> {
            self.defl.as_deref()
        }
        fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(x.iter().zip(&self.d).map(|(x, d)| x * d).collect())
        }
    }

    fn diag(n: usize) -> Diagonal {
        // Alternating signs, a degenerate pair and a 1/i² decay.
        let mut d: Vec<f64> = (1..=n)
            .map(|i| if i % 3 == 0 { -0.8 } else { 0.9 } / (i * i) as f64)
            .collect();
        d[1] = d[0];
        Diagonal {
            w: (0..n).map(|i| 0.5 + (i % 7) as f64 * 0.1).collect(),
            d,
            defl: None,
        }
    }

    fn sorted_magnitude(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
        v
    }

    #[test]
    fn recovers_diagonal_spectrum_with_restarts() {
        let op = diag(300);
        let cfg = SpectrumConfig {
            basis_size: Some(16),
            max_restarts: 200,
            ..Default::default()
        };
        let raw = lanczos(&op, 12, &cfg).unwrap();
        assert!(raw.converged, "{} {:?} {:?}", raw.restarts, raw.residuals, raw.values);
        assert!(raw.restarts > 0);
        let want = sorted_magnitude(op.d.clone());
        for (got, want) in raw.values.iter().zip(&want) {
            assert!((got - want).abs() < 1e-9, "{got} {want}");
        }
        // weighted orthonormality, including the degenerate pair
        let b = Basis {
            w: &op.w,
            n: 300,
            cols: vec![],
            len: 0,
            defl: None,
        };
        for i in 0..12 {
            for j in 0..12 {
                let g = b.dot(&raw.vectors[i], &raw.vectors[j]);
                assert!((g - f64::from(i == j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let op = diag(120);
        let cfg = SpectrumConfig::default();
        let a = lanczos(&op, 5, &cfg).unwrap();
        let b = lanczos(&op, 5, &cfg).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn stays_orthogonal_to_deflation() {
        let mut op = diag(80);
        let u: Vec<f64> = (0..80).map(|i| ((i as f64) * 0.3).cos()).collect();
        op.defl = Some(u.clone());
        // Make the operator respect the deflation: D' = P D P.
        let p = |x: &[f64], w: &[f64]| {
            let uu: f64 = w.iter().zip(&u).map(|(w, u)| w * u * u).sum();
            let ux: f64 = w.iter().zip(&u).zip(x).map(|((w, u), x)| w * u * x).sum();
            x.iter().zip(&u).map(|(x, u)| x - ux / uu * u).collect::<Vec<_>>()
        };
        struct Projected<'a, F: Fn(&[f64], &[f64]) -> Vec<f64>> {
            inner: &'a Diagonal,
            p: F,
        }
        impl<F: Fn(&[f64], &[f64]) -> Vec<f64>> KrylovOperator for Projected<'_, F> {
            fn weights(&self) -> &[f64] {
                &self.inner.w
            }
            fn deflation(&self) -> Option<&[f64]> {
                self.inner.defl.as_deref()
            }
            fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
                let y = self.inner.apply(&(self.p)(x, &self.inner.w))?;
                Ok((self.p)(&y, &self.inner.w))
            }
        }
        let proj = Projected { inner: &op, p };
        let raw = lanczos(&proj, 79, &SpectrumConfig::default()).unwrap();
        assert!(raw.converged);
        for v in &raw.vectors {
            let c: f64 = op.w.iter().zip(&u).zip(v).map(|((w, u), v)| w * u * v).sum();
            assert!(c.abs() < 1e-10);
        }
        assert!(lanczos(&proj, 80, &SpectrumConfig::default()).is_err());
    }

    #[test]
    fn determinant_arithmetic_and_assumption() {
        let d = fredholm_determinant(&[0.5, -0.5], 1e-6).unwrap();
        assert!((d.det - 0.75).abs() < 1e-15);
        assert_eq!(d.k_used, 2);
        let d = fredholm_determinant(&[0.5, 1e-9], 1e-6).unwrap();
        assert_eq!(d.k_used, 1);
        assert!(d.tail_converged);
        let d = fredholm_determinant(&[0.5, 0.2, 0.1, 0.05], 1e-6).unwrap();
        assert!(!d.tail_converged);
        let q = 0.9 * 0.95;
        assert!((d.plateau_change - (1.0 - q) / q).abs() < 1e-12);
        assert!(fredholm_determinant(&[1.0, 0.2], 1e-6).unwrap_err().is_assumption_violation());
        assert!(fredholm_determinant(&[], 1e-6).is_err());
    }

    fn instanton2d(nt: usize) -> InstantonResult {
        solve_instanton(
            &make_model2d(),
            &InstantonConfig {
                z_target: 3.0,
                n_t: nt,
                integrator: IntegratorConfig::euler(),
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn matches_dense_assembly_on_small_grid() {
        let m = make_model2d();
        let inst = instanton2d(50);
        let op = SecondVariationOperator::new(&m, &inst).unwrap();
        let a = assemble_dense(&op).unwrap();
        let asym = (&a - a.transpose()).abs().max();
        assert!(asym < 1e-10 * a.abs().max(), "{asym}");
        let dense = dense_eigenvalues(&a);
        let sr = dominant_eigenpairs(&op, 101, &SpectrumConfig::default()).unwrap();
        assert!(sr.converged);
        for (got, want) in sr.eigenvalues.iter().zip(&dense) {
            assert!((got - want).abs() < 1e-10, "{got} {want}");
        }
        let det_dense = (DMatrix::identity(102, 102) - &a).determinant();
        let prod = *sr.partial_products.last().unwrap();
        assert!((prod - det_dense).abs() < 1e-8 * det_dense.abs());
        for v in &sr.eigenvectors {
            assert!(v.inner(&inst.eta).unwrap().abs() < 1e-8 * inst.eta.norm());
        }
        // |log Π_k − log Π_m| ≤ Σ_{i>k} |log(1 − μ_i)|
        let logs: Vec<f64> = sr.eigenvalues.iter().map(|mu| (1.0 - mu).ln()).collect();
        let lp_m = prod.ln();
        for k in 0..logs.len() {
            let tail: f64 = logs[k + 1..].iter().map(|l| l.abs()).sum();
            assert!((sr.partial_products[k].ln() - lp_m).abs() <= tail + 1e-12);
        }
    }

    #[test]
    fn ou_spectrum_is_trivial() {
        let ou = make_ou(1.0, 1.0).unwrap();
        let inst = solve_instanton(
            &ou,
            &InstantonConfig {
                z_target: 1.0,
                n_t: 100,
                ..Default::default()
            },
        )
        .unwrap();
        let op = SecondVariationOperator::new(&ou, &inst).unwrap();
        let sr = dominant_eigenpairs(&op, 5, &SpectrumConfig::default()).unwrap();
        assert!(sr.eigenvalues.iter().all(|mu| mu.abs() <= 1e-8));
        assert_eq!(*sr.partial_products.last().unwrap(), 1.0);
        assert!(sr.converged);
    }
}
