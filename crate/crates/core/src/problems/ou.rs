use crate::error::{Error, Result};
use crate::problem::{LinearPart, ProblemSpec};

/// Scalar Ornstein–Uhlenbeck process `dX = −κ₀ X dt + √ε dB`, `X(0) = 0`,
/// observed through `f(x) = x` at time `T`. Everything is Gaussian, so the
/// rate function, prefactor and tail are known in closed form.
#[derive(Debug, Clone, Copy)]
pub struct Ou {
    kappa: f64,
    horizon: f64,
}

pub fn make_ou(relaxation: f64, horizon: f64) -> Result<Ou> {
    if !(relaxation > 0.0) || !relaxation.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "relaxation rate must be positive, got {relaxation}"
        )));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    Ok(Ou {
        kappa: relaxation,
        horizon,
    })
}

impl Ou {
    pub fn relaxation(&self) -> f64 {
        self.kappa
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Variance of `X(T)` at unit noise strength.
    pub fn variance(&self) -> f64 {
        (1.0 - (-2.0 * self.kappa * self.horizon).exp()) / (2.0 * self.kappa)
    }

    pub fn rate(&self, z: f64) -> f64 {
        z * z / (2.0 * self.variance())
    }

    pub fn multiplier(&self, z: f64) -> f64 {
        z / self.variance()
    }

    pub fn prefactor(&self, z: f64) -> f64 {
        self.variance().sqrt() / z
    }

    /// Exact `P(X(T) ≥ z)` at noise strength `ε`.
    pub fn exact_tail(&self, z: f64, eps: f64) -> f64 {
        let s = (eps * self.variance()).sqrt();
        0.5 * statrs::function::erf::erfc(z / (s * std::f64::consts::SQRT_2))
    }

    /// Exact density of `X(T)` at `z`.
    pub fn exact_pdf(&self, z: f64, eps: f64) -> f64 {
        let v = eps * self.variance();
        (-z * z / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }

    /// The instanton noise `η_z(t) = λ_z e^{−κ₀(T−t)}`.
    pub fn instanton_noise(&self, z: f64, t: f64) -> f64 {
        self.multiplier(z) * (-self.kappa * (self.horizon - t)).exp()
    }
}

impl LinearPart for Ou {
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        out[0] = -self.kappa * v[0];
    }

    fn apply_transpose(&self, v: &[f64], out: &mut [f64]) {
        self.apply(v, out)
    }

    fn propagate(&self, dt: f64, v: &[f64], out: &mut [f64]) {
        out[0] = (-self.kappa * dt).exp() * v[0];
    }

    fn propagate_transpose(&self, dt: f64, v: &[f64], out: &mut [f64]) {
        self.propagate(dt, v, out)
    }
}

impl ProblemSpec for Ou {
    fn state_dim(&self) -> usize {
        1
    }

    fn noise_rank(&self) -> usize {
        1
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -self.kappa * x[0];
    }

    fn jacobian_action(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = -self.kappa * v[0];
    }

    fn jacobian_transpose_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.jacobian_action(x, v, out)
    }

    fn hessian_bilinear(&self, _x: &[f64], _theta: &[f64], _v: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn sigma_apply(&self, w: &[f64], out: &mut [f64]) {
        out[0] = w[0];
    }

    fn sigma_adjoint(&self, v: &[f64], out: &mut [f64]) {
        out[0] = v[0];
    }

    fn observable(&self, x: &[f64]) -> f64 {
        x[0]
    }

    fn observable_gradient(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn observable_hessian_action(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn linear_part(&self) -> Option<&dyn LinearPart> {
        Some(self)
    }

    fn nonlinear_drift(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn nonlinear_jacobian_action(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn nonlinear_jacobian_transpose_action(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn name(&self) -> &str {
        "ou"
    }
}
