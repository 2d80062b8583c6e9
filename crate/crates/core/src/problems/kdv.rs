//! Stochastic Korteweg–De Vries equation on the periodic interval `[0, 2π)`:
//!
//! `∂ₜu + u ∂ₓu − ν ∂ₓₓu + κ ∂ₓₓₓu = √ε η`, `u(·, 0) = 0`,
//!
//! forced on the largest scale only, `η = π^{−1/2} (Ḃ₁ sin x + Ḃ₂ cos x)`,
//! and observed through the height `u(0, T)`. The state is the vector of
//! grid values `u(x_j)`, `x_j = 2πj/n_x`; derivatives are spectral and the
//! quadratic term is dealiased with the 2/3 rule.

use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::problem::{LinearPart, ProblemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdvConfig {
    pub n_x: usize,
    pub n_t: usize,
    #[serde(default = "default_coeff")]
    pub nu: f64,
    #[serde(default = "default_coeff")]
    pub kappa: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Apply the 2/3 rule to the quadratic term.
    #[serde(default = "default_dealias")]
    pub dealias: bool,
}

fn default_coeff() -> f64 {
    4e-2
}

fn default_horizon() -> f64 {
    1.0
}

fn default_dealias() -> bool {
    true
}

impl KdvConfig {
    pub fn new(n_x: usize, n_t: usize) -> Self {
        Self {
            n_x,
            n_t,
            nu: default_coeff(),
            kappa: default_coeff(),
            horizon: default_horizon(),
            dealias: default_dealias(),
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.horizon, self.n_t)
    }
}

pub struct Kdv {
    cfg: KdvConfig,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// Wavenumber of each FFT bin; zero at the Nyquist bin.
    wavenumber: Vec<f64>,
    /// Dealiasing mask.
    keep: Vec<f64>,
    sin: Vec<f64>,
    cos: Vec<f64>,
    exp_cache: Mutex<Vec<(f64, Arc<Vec<Complex64>>)>>,
}

impl std::fmt::Debug for Kdv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kdv").field("cfg", &self.cfg).finish()
    }
}

pub fn make_kdv(cfg: KdvConfig) -> Result<Kdv> {
    let n = cfg.n_x;
    if n < 32 || !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "n_x must be a power of two >= 32, got {n}"
        )));
    }
    if cfg.n_t < 2 {
        return Err(Error::InvalidArgument(format!("n_t must be >= 2, got {}", cfg.n_t)));
    }
    if !(cfg.nu >= 0.0) || !cfg.kappa.is_finite() || !(cfg.horizon > 0.0) {
        return Err(Error::InvalidArgument(
            "need nu >= 0, finite kappa and positive horizon".into(),
        ));
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let half = n / 2;
    let wavenumber: Vec<f64> = (0..n)
        .map(|j| {
            if j < half {
                j as f64
            } else if j == half {
                0.0
            } else {
                j as f64 - n as f64
            }
        })
        .collect();
    let keep: Vec<f64> = (0..n)
        .map(|j| {
            let k = if j <= half { j } else { n - j };
            if !cfg.dealias || (3 * k < n && j != half) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let xs: Vec<f64> = (0..n).map(|j| 2.0 * PI * j as f64 / n as f64).collect();
    let s = PI.powf(-0.5);
    Ok(Kdv {
        cfg,
        fwd,
        inv,
        wavenumber,
        keep,
        sin: xs.iter().map(|x| s * x.sin()).collect(),
        cos: xs.iter().map(|x| s * x.cos()).collect(),
        exp_cache: Mutex::new(Vec::new()),
    })
}

impl Kdv {
    pub fn config(&self) -> &KdvConfig {
        &self.cfg
    }

    pub fn grid_points(&self) -> Vec<f64> {
        let n = self.cfg.n_x;
        (0..n).map(|j| 2.0 * PI * j as f64 / n as f64).collect()
    }

    fn spectrum(&self, u: &[f64]) -> Vec<Complex64> {
        let mut c: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd.process(&mut c);
        c
    }

    fn physical(&self, mut c: Vec<Complex64>, out: &mut [f64]) {
        self.inv.process(&mut c);
        let s = 1.0 / self.cfg.n_x as f64;
        out.iter_mut().zip(&c).for_each(|(o, v)| *o = v.re * s);
    }

    /// Applies the Fourier multiplier `symbol(bin)` to a real grid function.
    fn multiplier(&self, u: &[f64], out: &mut [f64], symbol: impl Fn(usize) -> Complex64) {
        let mut c = self.spectrum(u);
        c.iter_mut().enumerate().for_each(|(j, v)| *v *= symbol(j));
        self.physical(c, out);
    }

    /// `P u`
    fn filtered(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        if self.cfg.dealias {
            self.multiplier(u, &mut out, |j| Complex64::new(self.keep[j], 0.0));
        } else {
            out.copy_from_slice(u);
        }
        out
    }

    /// `∂ₓ P u`
    fn derivative_filtered(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.multiplier(u, &mut out, |j| Complex64::new(0.0, self.wavenumber[j] * self.keep[j]));
        out
    }

    fn linear_symbol(&self, j: usize) -> Complex64 {
        let k = self.wavenumber[j];
        let n = self.cfg.n_x;
        let kr = if j == n / 2 { (n / 2) as f64 } else { k };
        Complex64::new(-self.cfg.nu * kr * kr, self.cfg.kappa * k * k * k)
    }

    fn exp_symbol(&self, dt: f64) -> Arc<Vec<Complex64>> {
        let mut cache = self.exp_cache.lock().expect("cache lock");
        if let Some((_, e)) = cache.iter().find(|(h, _)| *h == dt) {
            return e.clone();
        }
        let e: Arc<Vec<Complex64>> =
            Arc::new((0..self.cfg.n_x).map(|j| (self.linear_symbol(j) * dt).exp()).collect());
        if cache.len() >= 8 {
            cache.remove(0);
        }
        cache.push((dt, e.clone()));
        e
    }
}

impl LinearPart for Kdv {
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.multiplier(v, out, |j| self.linear_symbol(j));
    }

    fn apply_transpose(&self, v: &[f64], out: &mut [f64]) {
        self.multiplier(v, out, |j| self.linear_symbol(j).conj());
    }

    fn propagate(&self, dt: f64, v: &[f64], out: &mut [f64]) {
        let e = self.exp_symbol(dt);
        self.multiplier(v, out, |j| e[j]);
    }

    fn propagate_transpose(&self, dt: f64, v: &[f64], out: &mut [f64]) {
        let e = self.exp_symbol(dt);
        self.multiplier(v, out, |j| e[j].conj());
    }
}

impl ProblemSpec for Kdv {
    fn state_dim(&self) -> usize {
        self.cfg.n_x
    }

    fn noise_rank(&self) -> usize {
        2
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.cfg.n_x]
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.nonlinear_drift(x, out);
        let mut lx = vec![0.0; x.len()];
        self.apply(x, &mut lx);
        out.iter_mut().zip(&lx).for_each(|(o, l)| *o += l);
    }

    fn jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.nonlinear_jacobian_action(x, v, out);
        let mut lv = vec![0.0; x.len()];
        self.apply(v, &mut lv);
        out.iter_mut().zip(&lv).for_each(|(o, l)| *o += l);
    }

    fn jacobian_transpose_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.nonlinear_jacobian_transpose_action(x, v, out);
        let mut lv = vec![0.0; x.len()];
        self.apply_transpose(v, &mut lv);
        out.iter_mut().zip(&lv).for_each(|(o, l)| *o += l);
    }

    /// `P[(P v) ∂ₓ P θ]`
    fn hessian_bilinear(&self, _x: &[f64], theta: &[f64], v: &[f64], out: &mut [f64]) {
        let pv = self.filtered(v);
        let dth = self.derivative_filtered(theta);
        let prod: Vec<f64> = pv.iter().zip(&dth).map(|(a, b)| a * b).collect();
        if self.cfg.dealias {
            self.multiplier(&prod, out, |j| Complex64::new(self.keep[j], 0.0));
        } else {
            out.copy_from_slice(&prod);
        }
    }

    fn sigma_apply(&self, w: &[f64], out: &mut [f64]) {
        for j in 0..out.len() {
            out[j] = w[0] * self.sin[j] + w[1] * self.cos[j];
        }
    }

    fn sigma_adjoint(&self, v: &[f64], out: &mut [f64]) {
        out[0] = v.iter().zip(&self.sin).map(|(a, b)| a * b).sum();
        out[1] = v.iter().zip(&self.cos).map(|(a, b)| a * b).sum();
    }

    fn observable(&self, x: &[f64]) -> f64 {
        x[0]
    }

    fn observable_gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = 1.0;
    }

    fn observable_hessian_action(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn linear_part(&self) -> Option<&dyn LinearPart> {
        Some(self)
    }

    /// `−½ ∂ₓ P[(P u)²]`
    fn nonlinear_drift(&self, x: &[f64], out: &mut [f64]) {
        let pu = self.filtered(x);
        let sq: Vec<f64> = pu.iter().map(|a| a * a).collect();
        self.multiplier(&sq, out, |j| {
            Complex64::new(0.0, -0.5 * self.wavenumber[j] * self.keep[j])
        });
    }

    /// `−∂ₓ P[(P u)(P v)]`
    fn nonlinear_jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let pu = self.filtered(x);
        let pv = self.filtered(v);
        let prod: Vec<f64> = pu.iter().zip(&pv).map(|(a, b)| a * b).collect();
        self.multiplier(&prod, out, |j| {
            Complex64::new(0.0, -self.wavenumber[j] * self.keep[j])
        });
    }

    /// `P[(P u) ∂ₓ P w]`
    fn nonlinear_jacobian_transpose_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.hessian_bilinear(&[], v, x, out)
    }

    fn name(&self) -> &str {
        "kdv"
    }
}
