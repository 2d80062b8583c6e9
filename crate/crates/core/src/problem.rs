//! The problem abstraction: drift, its derivatives, the diffusion factor and
//! the observable of an additive-noise SDE `dX = b(X) dt + √ε σ dB`.

/// Stiff linear part `L` of a drift split `b(x) = L x + N(x)`.
///
/// Integrators use [`LinearPart::propagate`] (the exponential `e^{L dt}`) as
/// an integrating factor.
pub trait LinearPart: Send + Sync {
    fn apply(&self, v: &[f64], out: &mut [f64]);
    fn apply_transpose(&self, v: &[f64], out: &mut [f64]);
    /// `out = e^{L dt} v`
    fn propagate(&self, dt: f64, v: &[f64], out: &mut [f64]);
    /// `out = (e^{L dt})ᵀ v`
    fn propagate_transpose(&self, dt: f64, v: &[f64], out: &mut [f64]);
}

/// User-supplied dynamics and observable.
///
/// All methods must be pure: no hidden state, safe to call concurrently.
/// Vectors are plain slices; state vectors have length [`state_dim`],
/// noise vectors have length [`noise_rank`].
///
/// [`state_dim`]: ProblemSpec::state_dim
/// [`noise_rank`]: ProblemSpec::noise_rank
pub trait ProblemSpec: Send + Sync {
    fn state_dim(&self) -> usize;
    fn noise_rank(&self) -> usize;
    fn initial_state(&self) -> Vec<f64>;

    /// `b(x)`
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// `∇b(x) v`
    fn jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]);
    /// `∇b(x)ᵀ v`
    fn jacobian_transpose_action(&self, x: &[f64], v: &[f64], out: &mut [f64]);
    /// `⟨∇²b(x), θ⟩ v`, i.e. `Σ_k θ_k ∂_i∂_j b_k(x) v_j`. Symmetric in the
    /// sense that the matrix `⟨∇²b(x), θ⟩` is symmetric.
    fn hessian_bilinear(&self, x: &[f64], theta: &[f64], v: &[f64], out: &mut [f64]);

    /// `σ w` for a noise-coordinate vector `w`.
    fn sigma_apply(&self, w: &[f64], out: &mut [f64]);
    /// `σᵀ v`
    fn sigma_adjoint(&self, v: &[f64], out: &mut [f64]);

    fn observable(&self, x: &[f64]) -> f64;
    fn observable_gradient(&self, x: &[f64], out: &mut [f64]);
    fn observable_hessian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]);

    /// Optional linear split of the drift used as an integrating factor.
    fn linear_part(&self) -> Option<&dyn LinearPart> {
        None
    }

    /// `N(x) = b(x) − L x`; override when cheaper than the default.
    fn nonlinear_drift(&self, x: &[f64], out: &mut [f64]) {
        self.drift(x, out);
        if let Some(l) = self.linear_part() {
            let mut lx = vec![0.0; out.len()];
            l.apply(x, &mut lx);
            out.iter_mut().zip(&lx).for_each(|(o, a)| *o -= a);
        }
    }

    /// `∇N(x) v`
    fn nonlinear_jacobian_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.jacobian_action(x, v, out);
        if let Some(l) = self.linear_part() {
            let mut lv = vec![0.0; out.len()];
            l.apply(v, &mut lv);
            out.iter_mut().zip(&lv).for_each(|(o, a)| *o -= a);
        }
    }

    /// `∇N(x)ᵀ v`
    fn nonlinear_jacobian_transpose_action(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.jacobian_transpose_action(x, v, out);
        if let Some(l) = self.linear_part() {
            let mut lv = vec![0.0; out.len()];
            l.apply_transpose(v, &mut lv);
            out.iter_mut().zip(&lv).for_each(|(o, a)| *o -= a);
        }
    }

    /// Short identifier used in reports.
    fn name(&self) -> &str {
        "problem"
    }
}

/// Dense `σᵀσ` (r × r), assembled column by column.
pub fn noise_gram(spec: &dyn ProblemSpec) -> Vec<f64> {
    let (n, r) = (spec.state_dim(), spec.noise_rank());
    let mut g = vec![0.0; r * r];
    let mut e = vec![0.0; r];
    let mut s = vec![0.0; n];
    let mut col = vec![0.0; r];
    for j in 0..r {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        spec.sigma_apply(&e, &mut s);
        spec.sigma_adjoint(&s, &mut col);
        for i in 0..r {
            g[i * r + j] = col[i];
        }
    }
    g
}

/// Dense `a = σσᵀ` (n × n, row-major).
pub fn diffusion_matrix(spec: &dyn ProblemSpec) -> Vec<f64> {
    let (n, r) = (spec.state_dim(), spec.noise_rank());
    let mut cols = vec![0.0; n * r];
    let mut e = vec![0.0; r];
    let mut s = vec![0.0; n];
    for j in 0..r {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        spec.sigma_apply(&e, &mut s);
        for i in 0..n {
            cols[i * r + j] = s[i];
        }
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let mut acc = 0.0;
            for j in 0..r {
                acc += cols[i * r + j] * cols[k * r + j];
            }
            a[i * n + k] = acc;
        }
    }
    a
}

/// Consistency checks a user-supplied [`ProblemSpec`] should pass.
pub mod checks {
    use super::ProblemSpec;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Relative error between `∇b(x) v` and the central difference of `b`.
    pub fn jacobian_defect(spec: &dyn ProblemSpec, x: &[f64], v: &[f64], h: f64) -> f64 {
        let n = spec.state_dim();
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        for i in 0..n {
            xp[i] += h * v[i];
            xm[i] -= h * v[i];
        }
        let (mut bp, mut bm, mut jv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        spec.drift(&xp, &mut bp);
        spec.drift(&xm, &mut bm);
        spec.jacobian_action(x, v, &mut jv);
        let num: f64 = (0..n)
            .map(|i| ((bp[i] - bm[i]) / (2.0 * h) - jv[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        num / dot(&jv, &jv).sqrt().max(1e-300)
    }

    /// `|⟨u, ∇b v⟩ − ⟨∇bᵀ u, v⟩|`
    pub fn jacobian_transpose_defect(spec: &dyn ProblemSpec, x: &[f64], u: &[f64], v: &[f64]) -> f64 {
        let n = spec.state_dim();
        let (mut jv, mut jtu) = (vec![0.0; n], vec![0.0; n]);
        spec.jacobian_action(x, v, &mut jv);
        spec.jacobian_transpose_action(x, u, &mut jtu);
        (dot(u, &jv) - dot(&jtu, v)).abs()
    }

    /// `|⟨u, H_θ v⟩ − ⟨H_θ u, v⟩|`
    pub fn hessian_symmetry_defect(
        spec: &dyn ProblemSpec,
        x: &[f64],
        theta: &[f64],
        u: &[f64],
        v: &[f64],
    ) -> f64 {
        let n = spec.state_dim();
        let (mut hv, mut hu) = (vec![0.0; n], vec![0.0; n]);
        spec.hessian_bilinear(x, theta, v, &mut hv);
        spec.hessian_bilinear(x, theta, u, &mut hu);
        (dot(u, &hv) - dot(&hu, v)).abs()
    }

    /// `|⟨σ w, v⟩ − ⟨w, σᵀ v⟩|`
    pub fn sigma_adjoint_defect(spec: &dyn ProblemSpec, w: &[f64], v: &[f64]) -> f64 {
        let (n, r) = (spec.state_dim(), spec.noise_rank());
        let (mut sw, mut stv) = (vec![0.0; n], vec![0.0; r]);
        spec.sigma_apply(w, &mut sw);
        spec.sigma_adjoint(v, &mut stv);
        (dot(&sw, v) - dot(w, &stv)).abs()
    }
}
