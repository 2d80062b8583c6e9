use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discretization of the time interval `[0, T]`.
///
/// Quadrature weights are trapezoidal: every interval contributes half its
/// length to each of its two end nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `n_intervals` steps on `[0, horizon]`.
    pub fn uniform(horizon: f64, n_intervals: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_intervals < 2 {
            return Err(Error::InvalidArgument(format!(
                "time grid needs at least 2 intervals, got {n_intervals}"
            )));
        }
        let dt = horizon / n_intervals as f64;
        let mut nodes: Vec<f64> = (0..=n_intervals).map(|i| i as f64 * dt).collect();
        nodes[n_intervals] = horizon;
        Self::from_nodes(nodes)
    }

    /// Grid with arbitrary strictly increasing nodes starting at zero.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "time grid needs at least 3 nodes, got {}",
                nodes.len()
            )));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidArgument("first grid node must be 0".into()));
        }
        if nodes.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("grid nodes must be finite".into()));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "grid nodes must be strictly increasing".into(),
            ));
        }
        let n = nodes.len();
        let mut weights = vec![0.0; n];
        for i in 0..n - 1 {
            let half = 0.5 * (nodes[i + 1] - nodes[i]);
            weights[i] += half;
            weights[i + 1] += half;
        }
        Ok(Self { nodes, weights })
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Number of intervals `n_t`.
    pub fn n_intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Number of nodes `n_t + 1`.
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Length of interval `i`, i.e. `t_{i+1} - t_i`.
    pub fn step(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    /// Index of the node closest to `t`.
    pub fn nearest_node(&self, t: f64) -> usize {
        match self
            .nodes
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i >= self.nodes.len() => self.nodes.len() - 1,
            Err(i) => {
                if (t - self.nodes[i - 1]) <= (self.nodes[i] - t) {
                    i - 1
                } else {
                    i
                }
            }
        }
    }

    /// True when both grids have identical nodes.
    pub fn same_as(&self, other: &TimeGrid) -> bool {
        std::ptr::eq(self, other) || self.nodes == other.nodes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_horizon() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let s: f64 = g.weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        assert!((g.weights()[0] - 0.05).abs() < 1e-15);
        assert!((g.weights()[5] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn nonuniform_grid() {
        let g = TimeGrid::from_nodes(vec![0.0, 0.1, 0.5, 0.6, 2.0]).unwrap();
        let s: f64 = g.weights().iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        assert!(g.weights().iter().all(|w| *w >= 0.0));
        assert_eq!(g.horizon(), 2.0);
        assert_eq!(g.nearest_node(0.52), 2);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::uniform(1.0, 1).is_err());
        assert!(TimeGrid::uniform(0.0, 10).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.1, 0.5, 1.0]).is_err());
    }
}
