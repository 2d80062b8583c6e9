use crate::problem::{LinearPart, ProblemSpec};

/// Two-dimensional toy model
/// `dX = −(X + XY) dt + √ε dB₁`, `dY = (−4Y + X²) dt + √ε/2 dB₂`
/// with observable `f(x, y) = x + 2y` and start at the origin.
#[derive(Debug, Clone, Copy, Default)]
pub struct Model2d {
    lin: DiagonalLinear,
}

/// `L = diag(−1, −4)`
#[derive(Debug, Clone, Copy)]
struct DiagonalLinear {
    rates: [f64; 2],
}

impl Default for DiagonalLinear {
    fn default() -> Self {
        Self { rates: [-1.0, -4.0] }
    }
}

impl LinearPart for DiagonalLinear {
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        out[0] = self.rates[0] * v[0];
        out[1] = self.rates[1] * v[1];
    }

    fn apply_transpose(&self, v: &[f64], out: &mut [f64]) {
        self.apply(v, out)
    }

    fn propagate(&self, dt: f64, v: &[f64], out: &mut [f64]) {
        out[0] = (self.rates[0] * dt).exp() * v[0];
        out[1] = (self.rates[1] * dt).exp() * v[1];
    }

    fn propagate_transpose(&self, dt: f64, v: &[f64], out: &mut [f64]) {
        self.propagate(dt, v, out)
    }
}

pub fn make_model2d() -> Model2d {
    Model2d::default()
}

impl ProblemSpec for Model2d {
    fn state_dim(&self) -> usize {
        2
    }

    fn noise_rank(&self) -> usize {
        2
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -x[0] - x[0] * x[1];
        out[1] = -4.0 * x[1] + x[0] * x[0];
    }

    fn jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = (-1.0 - x[1]) * v[0] - x[0] * v[1];
        out[1] = 2.0 * x[0] * v[0] - 4.0 * v[1];
    }

    fn jacobian_transpose_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = (-1.0 - x[1]) * v[0] + 2.0 * x[0] * v[1];
        out[1] = -x[0] * v[0] - 4.0 * v[1];
    }

    fn hessian_bilinear(&self, _x: &[f64], theta: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = 2.0 * theta[1] * v[0] - theta[0] * v[1];
        out[1] = -theta[0] * v[0];
    }

    fn sigma_apply(&self, w: &[f64], out: &mut [f64]) {
        out[0] = w[0];
        out[1] = 0.5 * w[1];
    }

    fn sigma_adjoint(&self, v: &[f64], out: &mut [f64]) {
        self.sigma_apply(v, out)
    }

    fn observable(&self, x: &[f64]) -> f64 {
        x[0] + 2.0 * x[1]
    }

    fn observable_gradient(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = 2.0;
    }

    fn observable_hessian_action(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
    }

    fn linear_part(&self) -> Option<&dyn LinearPart> {
        Some(&self.lin)
    }

    fn nonlinear_drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -x[0] * x[1];
        out[1] = x[0] * x[0];
    }

    fn nonlinear_jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = -x[1] * v[0] - x[0] * v[1];
        out[1] = 2.0 * x[0] * v[0];
    }

    fn nonlinear_jacobian_transpose_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = -x[1] * v[0] + 2.0 * x[0] * v[1];
        out[1] = -x[0] * v[0];
    }

    fn name(&self) -> &str {
        "model2d"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{checks, diffusion_matrix};

    #[test]
    fn drift_values() {
        let m = make_model2d();
        let mut b = [0.0; 2];
        m.drift(&[0.0, 0.0], &mut b);
        assert_eq!(b, [0.0, 0.0]);
        m.drift(&[1.0, 1.0], &mut b);
        assert_eq!(b, [-2.0, -3.0]);
    }

    #[test]
    fn hessian_matrix() {
        let m = make_model2d();
        let th = [0.7, -1.3];
        let mut c0 = [0.0; 2];
        let mut c1 = [0.0; 2];
        m.hessian_bilinear(&[0.3, 0.2], &th, &[1.0, 0.0], &mut c0);
        m.hessian_bilinear(&[0.3, 0.2], &th, &[0.0, 1.0], &mut c1);
        assert_eq!(c0, [2.0 * th[1], -th[0]]);
        assert_eq!(c1, [-th[0], 0.0]);
    }

    #[test]
    fn derivative_consistency() {
        let m = make_model2d();
        let x = [0.4, -0.8];
        let v = [0.3, 1.1];
        let u = [-0.6, 0.2];
        assert!(checks::jacobian_defect(&m, &x, &v, 1e-5) < 1e-9);
        assert!(checks::jacobian_transpose_defect(&m, &x, &u, &v) < 1e-14);
        assert!(checks::hessian_symmetry_defect(&m, &x, &u, &v, &[0.5, 0.1]) < 1e-14);
        assert!(checks::sigma_adjoint_defect(&m, &u, &v) < 1e-15);
        assert_eq!(diffusion_matrix(&m), vec![1.0, 0.0, 0.0, 0.25]);
        let mut nl = [0.0; 2];
        let mut lx = [0.0; 2];
        let mut b = [0.0; 2];
        m.nonlinear_drift(&x, &mut nl);
        m.linear_part().unwrap().apply(&x, &mut lx);
        m.drift(&x, &mut b);
        assert!((nl[0] + lx[0] - b[0]).abs() < 1e-15 && (nl[1] + lx[1] - b[1]).abs() < 1e-15);
    }
}
