//! Single time steps of the forward map and their exact discrete
//! derivatives.
//!
//! A step advances `x_i → x_{i+1}` given the forcing `s_a = σ η_i` at the
//! left node and `s_b = σ η_{i+1}` at the right node. The forcing enters
//! with half weight at each end so that the noise cotangent of every node
//! matches its trapezoidal quadrature weight.
//!
//! With `E = e^{L h}` and `N = b − L`:
//!
//! * `EulerIf`: `x' = E (x + h N(x) + h/2 s_a) + h/2 s_b`
//! * `Rk2If` (Heun): `k1 = N(x) + s_a`, `y = E (x + h k1)`,
//!   `k2 = N(y) + s_b`, `x' = E (x + h/2 k1) + h/2 k2`
//!
//! The reverse routines are the transposes of the linearized steps, so the
//! gradient and Hessian-vector products they produce are exact for the
//! discrete objective.

use serde::{Deserialize, Serialize};

use crate::problem::{LinearPart, ProblemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Explicit Euler with integrating factor.
    EulerIf,
    /// Heun (explicit second-order Runge–Kutta) with integrating factor.
    Rk2If,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Use the problem's linear part as an integrating factor. Without a
    /// linear part (or with this off) the scheme is a plain explicit one.
    #[serde(default = "default_true")]
    pub integrating_factor: bool,
}

fn default_true() -> bool {
    true
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk2If,
            integrating_factor: true,
        }
    }
}

impl IntegratorConfig {
    pub fn euler() -> Self {
        Self {
            scheme: Scheme::EulerIf,
            integrating_factor: true,
        }
    }

    pub fn rk2() -> Self {
        Self::default()
    }
}

/// Cotangents produced by one reverse step.
pub(crate) struct ReverseOut<'a> {
    pub p: &'a mut [f64],
    pub ca: &'a mut [f64],
    pub cb: &'a mut [f64],
}

pub(crate) struct Stepper<'a> {
    spec: &'a dyn ProblemSpec,
    lin: Option<&'a dyn LinearPart>,
    scheme: Scheme,
    k1: Vec<f64>,
    y: Vec<f64>,
    dy: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
    t3: Vec<f64>,
    t4: Vec<f64>,
    t5: Vec<f64>,
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    out.iter_mut().zip(x).for_each(|(o, v)| *o += a * v);
}

impl<'a> Stepper<'a> {
    pub fn new(spec: &'a dyn ProblemSpec, cfg: &IntegratorConfig) -> Self {
        let n = spec.state_dim();
        let lin = if cfg.integrating_factor {
            spec.linear_part()
        } else {
            None
        };
        Self {
            spec,
            lin,
            scheme: cfg.scheme,
            k1: vec![0.0; n],
            y: vec![0.0; n],
            dy: vec![0.0; n],
            t1: vec![0.0; n],
            t2: vec![0.0; n],
            t3: vec![0.0; n],
            t4: vec![0.0; n],
            t5: vec![0.0; n],
        }
    }

    fn nl(spec: &dyn ProblemSpec, lin: Option<&dyn LinearPart>, x: &[f64], out: &mut [f64]) {
        if lin.is_some() {
            spec.nonlinear_drift(x, out)
        } else {
            spec.drift(x, out)
        }
    }

    fn jn(spec: &dyn ProblemSpec, lin: Option<&dyn LinearPart>, x: &[f64], v: &[f64], out: &mut [f64]) {
        if lin.is_some() {
            spec.nonlinear_jacobian_action(x, v, out)
        } else {
            spec.jacobian_action(x, v, out)
        }
    }

    fn jnt(spec: &dyn ProblemSpec, lin: Option<&dyn LinearPart>, x: &[f64], v: &[f64], out: &mut [f64]) {
        if lin.is_some() {
            spec.nonlinear_jacobian_transpose_action(x, v, out)
        } else {
            spec.jacobian_transpose_action(x, v, out)
        }
    }

    fn prop(lin: Option<&dyn LinearPart>, dt: f64, v: &[f64], out: &mut [f64]) {
        match lin {
            Some(l) => l.propagate(dt, v, out),
            None => out.copy_from_slice(v),
        }
    }

    fn prop_t(lin: Option<&dyn LinearPart>, dt: f64, v: &[f64], out: &mut [f64]) {
        match lin {
            Some(l) => l.propagate_transpose(dt, v, out),
            None => out.copy_from_slice(v),
        }
    }

    /// `out = Ψ(x; s_a, s_b)`
    pub fn forward(&mut self, h: f64, x: &[f64], sa: &[f64], sb: &[f64], out: &mut [f64]) {
        let (spec, lin) = (self.spec, self.lin);
        match self.scheme {
            Scheme::EulerIf => {
                Self::nl(spec, lin, x, &mut self.t1);
                for i in 0..x.len() {
                    self.t2[i] = x[i] + h * self.t1[i] + 0.5 * h * sa[i];
                }
                Self::prop(lin, h, &self.t2, out);
                axpy(out, 0.5 * h, sb);
            }
            Scheme::Rk2If => {
                Self::nl(spec, lin, x, &mut self.k1);
                for i in 0..x.len() {
                    self.k1[i] += sa[i];
                    self.t1[i] = x[i] + h * self.k1[i];
                }
                Self::prop(lin, h, &self.t1, &mut self.y);
                Self::nl(spec, lin, &self.y, &mut self.t2);
                for i in 0..x.len() {
                    self.t3[i] = x[i] + 0.5 * h * self.k1[i];
                }
                Self::prop(lin, h, &self.t3, out);
                for i in 0..x.len() {
                    out[i] += 0.5 * h * (self.t2[i] + sb[i]);
                }
            }
        }
    }

    /// Linearized step: `out = ∂Ψ/∂x g + ∂Ψ/∂s_a ds_a + ∂Ψ/∂s_b ds_b` at
    /// `(x, s_a)`.
    #[allow(clippy::too_many_arguments)]
    pub fn tangent(
        &mut self,
        h: f64,
        x: &[f64],
        g: &[f64],
        sa: &[f64],
        dsa: &[f64],
        dsb: &[f64],
        out: &mut [f64],
    ) {
        let (spec, lin) = (self.spec, self.lin);
        let n = x.len();
        match self.scheme {
            Scheme::EulerIf => {
                Self::jn(spec, lin, x, g, &mut self.t1);
                for i in 0..n {
                    self.t2[i] = g[i] + h * self.t1[i] + 0.5 * h * dsa[i];
                }
                Self::prop(lin, h, &self.t2, out);
                axpy(out, 0.5 * h, dsb);
            }
            Scheme::Rk2If => {
                // stage point y
                Self::nl(spec, lin, x, &mut self.k1);
                for i in 0..n {
                    self.t1[i] = x[i] + h * (self.k1[i] + sa[i]);
                }
                Self::prop(lin, h, &self.t1, &mut self.y);
                // dk1 in t2
                Self::jn(spec, lin, x, g, &mut self.t2);
                for i in 0..n {
                    self.t2[i] += dsa[i];
                    self.t3[i] = g[i] + h * self.t2[i];
                }
                Self::prop(lin, h, &self.t3, &mut self.dy);
                Self::jn(spec, lin, &self.y, &self.dy, &mut self.t4);
                for i in 0..n {
                    self.t3[i] = g[i] + 0.5 * h * self.t2[i];
                }
                Self::prop(lin, h, &self.t3, out);
                for i in 0..n {
                    out[i] += 0.5 * h * (self.t4[i] + dsb[i]);
                }
            }
        }
    }

    /// Transposed step: given the cotangent `p'` of `x_{i+1}`, returns the
    /// cotangents of `x_i`, `s_a` and `s_b`.
    pub fn reverse(&mut self, h: f64, x: &[f64], sa: &[f64], p_next: &[f64], out: ReverseOut<'_>) {
        let (spec, lin) = (self.spec, self.lin);
        let n = x.len();
        match self.scheme {
            Scheme::EulerIf => {
                Self::prop_t(lin, h, p_next, &mut self.t1);
                Self::jnt(spec, lin, x, &self.t1, &mut self.t2);
                for i in 0..n {
                    out.p[i] = self.t1[i] + h * self.t2[i];
                    out.ca[i] = 0.5 * h * self.t1[i];
                    out.cb[i] = 0.5 * h * p_next[i];
                }
            }
            Scheme::Rk2If => {
                Self::nl(spec, lin, x, &mut self.k1);
                for i in 0..n {
                    self.t1[i] = x[i] + h * (self.k1[i] + sa[i]);
                }
                Self::prop(lin, h, &self.t1, &mut self.y);
                // pk2 = h/2 p'
                for i in 0..n {
                    out.cb[i] = 0.5 * h * p_next[i];
                }
                // py = J(y)ᵀ pk2
                Self::jnt(spec, lin, &self.y, out.cb, &mut self.t2);
                Self::prop_t(lin, h, p_next, &mut self.t3); // e1
                Self::prop_t(lin, h, &self.t2, &mut self.t4); // e2
                for i in 0..n {
                    out.ca[i] = 0.5 * h * self.t3[i] + h * self.t4[i];
                }
                Self::jnt(spec, lin, x, out.ca, &mut self.t5);
                for i in 0..n {
                    out.p[i] = self.t3[i] + self.t4[i] + self.t5[i];
                }
            }
        }
    }

    /// Transposed step together with its linearization (second-order
    /// adjoint). `first` receives the cotangents of the reverse step,
    /// `second` their directional derivatives along the forward tangent
    /// `(g, ds_a)` and the reverse tangent `z'`.
    #[allow(clippy::too_many_arguments)]
    pub fn reverse_second(
        &mut self,
        h: f64,
        x: &[f64],
        g: &[f64],
        sa: &[f64],
        dsa: &[f64],
        p_next: &[f64],
        z_next: &[f64],
        first: ReverseOut<'_>,
        second: ReverseOut<'_>,
    ) {
        let spec = self.spec;
        let n = x.len();
        match self.scheme {
            Scheme::EulerIf => {
                // first-order part; t1 holds pu = Eᵀ p'
                self.reverse(h, x, sa, p_next, first);
                let lin = self.lin;
                let pu = std::mem::take(&mut self.t1);
                Self::prop_t(lin, h, z_next, &mut self.t3); // zu
                Self::jnt(spec, lin, x, &self.t3, &mut self.t4);
                spec.hessian_bilinear(x, &pu, g, &mut self.t5);
                for i in 0..n {
                    second.p[i] = self.t3[i] + h * (self.t4[i] + self.t5[i]);
                    second.ca[i] = 0.5 * h * self.t3[i];
                    second.cb[i] = 0.5 * h * z_next[i];
                }
                self.t1 = pu;
            }
            Scheme::Rk2If => {
                let lin = self.lin;
                // y and dy
                Self::nl(spec, lin, x, &mut self.k1);
                for i in 0..n {
                    self.t1[i] = x[i] + h * (self.k1[i] + sa[i]);
                }
                Self::prop(lin, h, &self.t1, &mut self.y);
                Self::jn(spec, lin, x, g, &mut self.t2);
                for i in 0..n {
                    self.t3[i] = g[i] + h * (self.t2[i] + dsa[i]);
                }
                Self::prop(lin, h, &self.t3, &mut self.dy);

                // first order
                for i in 0..n {
                    first.cb[i] = 0.5 * h * p_next[i]; // pk2
                }
                Self::jnt(spec, lin, &self.y, first.cb, &mut self.t2); // py
                Self::prop_t(lin, h, p_next, &mut self.t3); // e1
                Self::prop_t(lin, h, &self.t2, &mut self.t4); // e2
                for i in 0..n {
                    first.ca[i] = 0.5 * h * self.t3[i] + h * self.t4[i]; // pk1
                }
                Self::jnt(spec, lin, x, first.ca, &mut self.t5);
                for i in 0..n {
                    first.p[i] = self.t3[i] + self.t4[i] + self.t5[i];
                }

                // second order
                for i in 0..n {
                    second.cb[i] = 0.5 * h * z_next[i]; // zk2
                }
                Self::jnt(spec, lin, &self.y, second.cb, &mut self.t2);
                spec.hessian_bilinear(&self.y, first.cb, &self.dy, &mut self.t3);
                for i in 0..n {
                    self.t2[i] += self.t3[i]; // zy
                }
                Self::prop_t(lin, h, z_next, &mut self.t3); // f1
                Self::prop_t(lin, h, &self.t2, &mut self.t4); // f2
                for i in 0..n {
                    second.ca[i] = 0.5 * h * self.t3[i] + h * self.t4[i]; // zk1
                }
                Self::jnt(spec, lin, x, second.ca, &mut self.t5);
                spec.hessian_bilinear(x, first.ca, g, &mut self.t2);
                for i in 0..n {
                    second.p[i] = self.t3[i] + self.t4[i] + self.t5[i] + self.t2[i];
                }
            }
        }
    }
}
