//! Time-indexed vector paths and the weighted `L²` geometry on them.
//!
//! Noise paths live in forced coordinates of width `rank σ`; state and
//! adjoint paths have the full state dimension. All inner products use the
//! trapezoidal weights of the underlying [`TimeGrid`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    grid: Arc<TimeGrid>,
    width: usize,
    values: Vec<f64>,
}

impl Path {
    pub fn zeros(grid: Arc<TimeGrid>, width: usize) -> Self {
        let len = grid.n_nodes() * width;
        Self {
            grid,
            width,
            values: vec![0.0; len],
        }
    }

    /// Builds a path node by node; `fill(t, out)` writes the value at time `t`.
    pub fn from_fn(grid: Arc<TimeGrid>, width: usize, mut fill: impl FnMut(f64, &mut [f64])) -> Self {
        let mut p = Self::zeros(grid, width);
        for i in 0..p.n_nodes() {
            let t = p.grid.nodes()[i];
            fill(t, p.node_mut(i));
        }
        p
    }

    pub fn from_values(grid: Arc<TimeGrid>, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() * width {
            return Err(Error::Dimension(format!(
                "expected {} values for {} nodes of width {width}, got {}",
                grid.n_nodes() * width,
                grid.n_nodes(),
                values.len()
            )));
        }
        Ok(Self {
            grid,
            width,
            values,
        })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn last(&self) -> &[f64] {
        self.node(self.n_nodes() - 1)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.grid.clone(), self.width)
    }

    fn check_compatible(&self, other: &Path) -> Result<()> {
        if self.width != other.width {
            return Err(Error::Dimension(format!(
                "path widths differ: {} vs {}",
                self.width, other.width
            )));
        }
        if !self.grid.same_as(&other.grid) {
            return Err(Error::Dimension("paths live on different time grids".into()));
        }
        Ok(())
    }

    /// `L²` inner product with trapezoidal quadrature.
    pub fn inner(&self, other: &Path) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(weighted_dot(
            self.grid.weights(),
            self.width,
            &self.values,
            &other.values,
        ))
    }

    pub fn norm(&self) -> f64 {
        weighted_dot(self.grid.weights(), self.width, &self.values, &self.values).sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Path) -> Result<()> {
        self.check_compatible(x)?;
        for (a, b) in self.values.iter_mut().zip(&x.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Path) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn has_non_finite(&self) -> bool {
        self.values.iter().any(|v| !v.is_finite())
    }
}

/// `Σ_i w_i ⟨a_i, b_i⟩` for row-major node blocks of the given width.
pub(crate) fn weighted_dot(weights: &[f64], width: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let lo = i * width;
        let mut s = 0.0;
        for k in lo..lo + width {
            s += a[k] * b[k];
        }
        acc += w * s;
    }
    acc
}

/// `L²([0,T])` inner product of two paths on the same grid.
pub fn l2_inner(p: &Path, q: &Path) -> Result<f64> {
    p.inner(q)
}

/// Removes the component of `delta` along `eta`:
/// `δη − (⟨η, δη⟩ / ‖η‖²) η`.
pub fn project_orthogonal(delta: &Path, eta: &Path) -> Result<Path> {
    let nn = eta.inner(eta)?;
    if !(nn > 0.0) {
        return Err(Error::SingularInstanton);
    }
    let c = eta.inner(delta)? / nn;
    let mut out = delta.clone();
    out.axpy(-c, eta)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::uniform(1.0, n).unwrap())
    }

    #[test]
    fn constant_one_has_unit_norm() {
        let g = grid(16);
        let p = Path::from_fn(g, 1, |_, o| o[0] = 1.0);
        assert!((l2_inner(&p, &p).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_path() {
        let g = grid(16);
        let z = Path::zeros(g.clone(), 2);
        let q = Path::from_fn(g, 2, |t, o| {
            o[0] = t.sin();
            o[1] = 3.0;
        });
        assert_eq!(l2_inner(&z, &q).unwrap(), 0.0);
        assert_eq!(z.norm(), 0.0);
    }

    #[test]
    fn mismatched_paths_rejected() {
        let a = Path::zeros(grid(8), 2);
        let b = Path::zeros(grid(8), 1);
        let c = Path::zeros(grid(9), 2);
        assert!(matches!(l2_inner(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(l2_inner(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn projection_of_zero_instanton_fails() {
        let g = grid(8);
        let z = Path::zeros(g.clone(), 1);
        let d = Path::from_fn(g, 1, |t, o| o[0] = t);
        assert_eq!(project_orthogonal(&d, &z), Err(Error::SingularInstanton));
    }

    #[test]
    fn projection_annihilates_instanton() {
        let g = grid(10);
        let eta = Path::from_fn(g, 2, |t, o| {
            o[0] = 1.0 + t;
            o[1] = (3.0 * t).cos();
        });
        let p = project_orthogonal(&eta, &eta).unwrap();
        assert!(p.norm() < 1e-14);
    }

    #[test]
    fn trapezoid_converges_at_second_order() {
        // ∫_0^1 sin²(πt) dt = 1/2
        let err = |n: usize| {
            let p = Path::from_fn(grid(n), 1, |t, o| o[0] = (std::f64::consts::PI * t).sin() + t);
            // ∫ (sin πt + t)² = 1/2 + 2/π + 1/3
            let exact = 0.5 + 2.0 / std::f64::consts::PI + 1.0 / 3.0;
            (p.norm().powi(2) - exact).abs()
        };
        let (e1, e2) = (err(20), err(40));
        let rate = (e1 / e2).log2();
        assert!((rate - 2.0).abs() < 0.05, "rate {rate}");
    }

    #[test]
    fn projection_matches_dense_projector() {
        // Dense oracle: (I − η ηᵀ W / ‖η‖²_W) δη on n_t = 10.
        let g = grid(10);
        let eta = Path::from_fn(g.clone(), 2, |t, o| {
            o[0] = (7.0 * t).sin() + 0.3;
            o[1] = t * t - 0.2;
        });
        let d = Path::from_fn(g.clone(), 2, |t, o| {
            o[0] = (t * 13.0).cos();
            o[1] = 1.0 - 2.0 * t;
        });
        let w: Vec<f64> = g.weights().iter().flat_map(|w| [*w, *w]).collect();
        let e = eta.values();
        let x = d.values();
        let nn: f64 = (0..e.len()).map(|k| e[k] * w[k] * e[k]).sum();
        let dense: Vec<f64> = (0..e.len())
            .map(|i| {
                let row: f64 = (0..e.len()).map(|k| e[i] * e[k] * w[k] / nn * x[k]).sum();
                x[i] - row
            })
            .collect();
        let p = project_orthogonal(&d, &eta).unwrap();
        for (a, b) in p.values().iter().zip(&dense) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn arb_path(n: usize, width: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0..10.0f64, (n + 1) * width)
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_orthogonal(e in arb_path(12, 2), x in arb_path(12, 2)) {
            let g = grid(12);
            let eta = Path::from_values(g.clone(), 2, e).unwrap();
            prop_assume!(eta.norm() > 1e-3);
            let x = Path::from_values(g, 2, x).unwrap();
            let p1 = project_orthogonal(&x, &eta).unwrap();
            let p2 = project_orthogonal(&p1, &eta).unwrap();
            let scale = x.norm().max(1e-300);
            prop_assert!(p1.max_abs_diff(&p2).unwrap() <= 1e-12 * scale.max(1.0));
            let ortho = eta.inner(&p1).unwrap().abs();
            prop_assert!(ortho <= 1e-12 * eta.norm() * scale);
        }

        #[test]
        fn inner_is_symmetric(a in arb_path(8, 3), b in arb_path(8, 3)) {
            let g = grid(8);
            let a = Path::from_values(g.clone(), 3, a).unwrap();
            let b = Path::from_values(g, 3, b).unwrap();
            prop_assert_eq!(a.inner(&b).unwrap(), b.inner(&a).unwrap());
        }
    }
}
