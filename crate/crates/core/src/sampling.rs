//! Monte Carlo references: direct simulation of tail frequencies,
//! instanton-shifted conditioned paths, an importance-sampled tail
//! estimator and Wilson score intervals.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::instanton::InstantonResult;
use crate::problem::{LinearPart, ProblemSpec};
use crate::rng::{sample_rng, standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SdeScheme {
    /// `X' = E(X + h N(X) + √ε σ ΔB)`
    #[default]
    EulerMaruyamaIf,
    /// Predictor–corrector with the noise split between both ends of the step.
    Heun,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub eps: f64,
    /// Paths for tail estimates; accepted paths for conditioned sampling.
    pub sample_count: usize,
    pub dt: f64,
    pub horizon: f64,
    pub scheme: SdeScheme,
    pub seed: u64,
    pub threshold: f64,
    /// Acceptance window `|f(X_T) − f(φ_z(T))| / √ε` for conditioned paths.
    pub conditioning_tolerance: f64,
    pub confidence: f64,
    /// Cap on simulated paths for conditioned sampling.
    pub max_attempts: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            eps: 0.5,
            sample_count: 100_000,
            dt: 1e-3,
            horizon: 1.0,
            scheme: SdeScheme::EulerMaruyamaIf,
            seed: 2024,
            threshold: 3.0,
            conditioning_tolerance: 0.05,
            confidence: 0.95,
            max_attempts: 50_000_000,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return bad("dt and horizon must be positive".into());
        }
        if self.sample_count == 0 {
            return bad("sample_count must be at least 1".into());
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad(format!("confidence must lie in (0, 1), got {}", self.confidence));
        }
        if !(self.conditioning_tolerance > 0.0) {
            return bad("conditioning_tolerance must be positive".into());
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }
}

/// Wilson score interval for `hits` successes out of `n` trials.
pub fn wilson_interval(hits: u64, n: u64, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidArgument("no trials".into()));
    }
    if hits > n {
        return Err(Error::InvalidArgument(format!("{hits} hits out of {n} trials")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    let z = Normal::new(0.0, 1.0)
        .expect("unit normal")
        .inverse_cdf(0.5 + 0.5 * confidence);
    let (nf, p) = (n as f64, hits as f64 / n as f64);
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if hits == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if hits == n { 1.0 } else { (center + half).min(1.0) };
    Ok((lo, hi))
}

/// Additive-noise SDE step with the integrating factor of the linear part.
struct SdeStepper<'a> {
    lin: Option<&'a dyn LinearPart>,
    scheme: SdeScheme,
    t1: Vec<f64>,
    t2: Vec<f64>,
    y: Vec<f64>,
}

impl<'a> SdeStepper<'a> {
    fn new(spec: &'a dyn ProblemSpec, scheme: SdeScheme) -> Self {
        let n = spec.state_dim();
        Self {
            lin: spec.linear_part(),
            scheme,
            t1: vec![0.0; n],
            t2: vec![0.0; n],
            y: vec![0.0; n],
        }
    }

    fn prop(&self, h: f64, v: &[f64], out: &mut [f64]) {
        match self.lin {
            Some(l) => l.propagate(h, v, out),
            None => out.copy_from_slice(v),
        }
    }

    /// Advances `x` in place. `k1` is the nonlinear drift at `(t_i, x)`,
    /// `noise` the state-space increment, `drift_next` evaluates the drift
    /// at `t_{i+1}` for the corrector.
    fn step(&mut self, h: f64, x: &mut [f64], k1: &[f64], noise: &[f64], drift_next: impl FnOnce(&[f64], &mut [f64])) {
        let n = x.len();
        match self.scheme {
            SdeScheme::EulerMaruyamaIf => {
                for i in 0..n {
                    self.t1[i] = x[i] + h * k1[i] + noise[i];
                }
                let t1 = std::mem::take(&mut self.t1);
                self.prop(h, &t1, x);
                self.t1 = t1;
            }
            SdeScheme::Heun => {
                for i in 0..n {
                    self.t1[i] = x[i] + h * k1[i] + noise[i];
                }
                let (t1, mut y) = (std::mem::take(&mut self.t1), std::mem::take(&mut self.y));
                self.prop(h, &t1, &mut y);
                let mut k2 = std::mem::take(&mut self.t2);
                drift_next(&y, &mut k2);
                let mut a = t1;
                for i in 0..n {
                    a[i] = x[i] + 0.5 * h * k1[i] + 0.5 * noise[i];
                }
                self.prop(h, &a, x);
                for i in 0..n {
                    x[i] += 0.5 * h * k2[i] + 0.5 * noise[i];
                }
                self.t1 = a;
                self.t2 = k2;
                self.y = y;
            }
        }
    }
}

fn nonlinear(spec: &dyn ProblemSpec, x: &[f64], out: &mut [f64]) {
    if spec.linear_part().is_some() {
        spec.nonlinear_drift(x, out);
    } else {
        spec.drift(x, out);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailMcResult {
    pub hits: u64,
    pub samples: u64,
    /// Trajectories that produced non-finite values; counted as misses.
    pub failures: u64,
    pub frequency: f64,
    pub interval: (f64, f64),
}

/// Direct simulation of `dX = b(X) dt + √ε σ dB` and the frequency of
/// `f(X_T) ≥ z`.
pub fn direct_tail_mc(spec: &dyn ProblemSpec, cfg: &McConfig) -> Result<TailMcResult> {
    cfg.validate()?;
    let (n, r) = (spec.state_dim(), spec.noise_rank());
    let steps = cfg.n_steps();
    let h = cfg.horizon / steps as f64;
    let scale = (cfg.eps * h).sqrt();
    let x0 = spec.initial_state();
    let (hits, failures) = (0..cfg.sample_count as u64)
        .into_par_iter()
        .map_init(
            || (SdeStepper::new(spec, cfg.scheme), vec![0.0; n], vec![0.0; n], vec![0.0; r], vec![0.0; n]),
            |(st, x, k1, dw, noise), k| {
                let mut rng = sample_rng(cfg.seed, k);
                x.copy_from_slice(&x0);
                for _ in 0..steps {
                    dw.iter_mut().for_each(|v| *v = scale * standard_normal(&mut rng));
                    spec.sigma_apply(dw, noise);
                    nonlinear(spec, x, k1);
                    st.step(h, x, k1, noise, |y, out| nonlinear(spec, y, out));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    (0u64, 1u64)
                } else {
                    (u64::from(spec.observable(x) >= cfg.threshold), 0)
                }
            },
        )
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let samples = cfg.sample_count as u64;
    Ok(TailMcResult {
        hits,
        samples,
        failures,
        frequency: hits as f64 / samples as f64,
        interval: wilson_interval(hits, samples, cfg.confidence)?,
    })
}

fn check_instanton_grid(instanton: &InstantonResult, cfg: &McConfig) -> Result<()> {
    let grid = instanton.grid();
    let uniform = (grid.horizon() / grid.n_intervals() as f64 - cfg.dt).abs() <= 1e-9 * cfg.dt;
    if !uniform || (grid.horizon() - cfg.horizon).abs() > 1e-12 {
        return Err(Error::InvalidArgument(
            "sampling needs the instanton on a uniform grid with the configured dt and horizon".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsTailResult {
    pub estimate: f64,
    pub std_error: f64,
    pub interval: (f64, f64),
    pub samples: u64,
    pub hits: u64,
}

/// Tail probability by simulating with the instanton noise added to the
/// Brownian increments and reweighting with the exact discrete likelihood
/// ratio of the shifted Gaussian increments.
pub fn importance_sampled_tail(spec: &dyn ProblemSpec, instanton: &InstantonResult, cfg: &McConfig) -> Result<IsTailResult> {
    cfg.validate()?;
    check_instanton_grid(instanton, cfg)?;
    let (n, r) = (spec.state_dim(), spec.noise_rank());
    let steps = instanton.grid().n_intervals();
    let h = cfg.horizon / steps as f64;
    let sq_h = h.sqrt();
    // Mean shift of the standardized increment in step i.
    let shift: Vec<Vec<f64>> = (0..steps)
        .map(|i| {
            let (a, b) = (instanton.eta.node(i), instanton.eta.node(i + 1));
            (0..r).map(|c| 0.5 * (a[c] + b[c]) * sq_h / cfg.eps.sqrt()).collect()
        })
        .collect();
    let x0 = spec.initial_state();
    let scale = (cfg.eps * h).sqrt();
    let (sum, sum_sq, hits) = (0..cfg.sample_count as u64)
        .into_par_iter()
        .map_init(
            || (SdeStepper::new(spec, cfg.scheme), vec![0.0; n], vec![0.0; n], vec![0.0; r], vec![0.0; n]),
            |(st, x, k1, dw, noise), k| {
                let mut rng = sample_rng(cfg.seed, k);
                x.copy_from_slice(&x0);
                let mut log_w = 0.0;
                for s in shift.iter() {
                    for c in 0..r {
                        let g = standard_normal(&mut rng);
                        log_w += -s[c] * g - 0.5 * s[c] * s[c];
                        dw[c] = scale * (g + s[c]);
                    }
                    spec.sigma_apply(dw, noise);
                    nonlinear(spec, x, k1);
                    st.step(h, x, k1, noise, |y, out| nonlinear(spec, y, out));
                }
                let hit = x.iter().all(|v| v.is_finite()) && spec.observable(x) >= cfg.threshold;
                let v = if hit { log_w.exp() } else { 0.0 };
                (v, v * v, u64::from(hit))
            },
        )
        .reduce(|| (0.0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let m = cfg.sample_count as f64;
    let estimate = sum / m;
    let var = (sum_sq / m - estimate * estimate).max(0.0) * m / (m - 1.0).max(1.0);
    let std_error = (var / m).sqrt();
    let z = Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(0.5 + 0.5 * cfg.confidence);
    Ok(IsTailResult {
        estimate,
        std_error,
        interval: ((estimate - z * std_error).max(0.0), estimate + z * std_error),
        samples: cfg.sample_count as u64,
        hits,
    })
}

#[derive(Debug, Clone)]
pub struct ConditionedSamples {
    /// Recorded grid nodes.
    pub nodes: Vec<usize>,
    /// `states[k][j]`: state `X = φ_z + √ε Y` of accepted sample `k` at `nodes[j]`.
    pub states: Vec<Vec<DVector<f64>>>,
    /// Log of the reweighting factor per accepted sample.
    pub log_weights: Vec<f64>,
    pub attempted: u64,
    pub accepted: u64,
    /// Accepted endpoints whose weight overflowed; excluded.
    pub overflowed: u64,
}

#[derive(Debug, Clone)]
pub struct WeightedMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Standard error of each mean component, `√(var / ESS)`.
    pub mean_std_error: DVector<f64>,
    pub effective_sample_size: f64,
}

impl ConditionedSamples {
    pub fn moments(&self, j: usize) -> Result<WeightedMoments> {
        if j >= self.nodes.len() || self.states.is_empty() {
            return Err(Error::InvalidArgument("no such recorded node".into()));
        }
        let top = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - top).exp()).collect();
        let (sw, sw2) = (w.iter().sum::<f64>(), w.iter().map(|v| v * v).sum::<f64>());
        let n = self.states[0][j].len();
        let mut mean = DVector::zeros(n);
        for (s, wk) in self.states.iter().zip(&w) {
            mean.axpy(*wk / sw, &s[j], 1.0);
        }
        let mut cov = DMatrix::zeros(n, n);
        for (s, wk) in self.states.iter().zip(&w) {
            let d = &s[j] - &mean;
            cov += &d * d.transpose() * (*wk / sw);
        }
        let ess = sw * sw / sw2;
        let mean_std_error = cov.diagonal().map(|v| (v / ess).sqrt());
        Ok(WeightedMoments {
            mean,
            covariance: cov,
            mean_std_error,
            effective_sample_size: ess,
        })
    }
}

/// Simulates `dY = [b(φ_z + √ε Y) − b(φ_z)]/√ε dt + σ dB`, keeps paths whose
/// endpoint satisfies the conditioning window and attaches the weight
///
/// ```text
/// exp{ ε⁻¹ ∫ ⟨b(φ+√εY) − b(φ) − √ε∇b(φ)Y, θ⟩ dt
///    + ε⁻¹ λ (f(φ_T+√εY_T) − f(φ_T) − √ε ∇f(φ_T)·Y_T) }.
/// ```
pub fn importance_sampled_paths(
    spec: &dyn ProblemSpec,
    instanton: &InstantonResult,
    record_times: &[f64],
    cfg: &McConfig,
) -> Result<ConditionedSamples> {
    cfg.validate()?;
    check_instanton_grid(instanton, cfg)?;
    let grid = instanton.grid();
    let mut nodes = Vec::with_capacity(record_times.len());
    for &t in record_times {
        let i = grid.nearest_node(t);
        if (grid.nodes()[i] - t).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("time {t} is not a grid node")));
        }
        nodes.push(i);
    }
    let (n, r) = (spec.state_dim(), spec.noise_rank());
    let steps = grid.n_intervals();
    let h = grid.step(0);
    let se = cfg.eps.sqrt();
    let w = grid.weights();
    let (phi, theta, lambda) = (&instanton.phi, &instanton.theta, instanton.lambda);
    let phi_t = phi.last();
    let f_t = spec.observable(phi_t);
    let mut grad_t = vec![0.0; n];
    spec.observable_gradient(phi_t, &mut grad_t);
    let n_phi: Vec<Vec<f64>> = (0..=steps)
        .map(|i| {
            let mut o = vec![0.0; n];
            nonlinear(spec, phi.node(i), &mut o);
            o
        })
        .collect();
    // Drift of the shifted system at node i, and its weight integrand.
    let shifted = |i: usize, y: &[f64], out: &mut [f64], tmp: &mut [f64]| {
        for k in 0..n {
            tmp[k] = phi.node(i)[k] + se * y[k];
        }
        nonlinear(spec, tmp, out);
        for k in 0..n {
            out[k] = (out[k] - n_phi[i][k]) / se;
        }
    };
    let jac = |i: usize, y: &[f64], out: &mut [f64]| {
        if spec.linear_part().is_some() {
            spec.nonlinear_jacobian_action(phi.node(i), y, out);
        } else {
            spec.jacobian_action(phi.node(i), y, out);
        }
    };

    let simulate = |k: u64| -> Option<(Vec<DVector<f64>>, f64)> {
        let mut st = SdeStepper::new(spec, cfg.scheme);
        let mut rng = sample_rng(cfg.seed, k);
        let (mut y, mut k1, mut tmp, mut jy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let (mut dw, mut noise, mut tmp2) = (vec![0.0; r], vec![0.0; n], vec![0.0; n]);
        let mut rec = Vec::with_capacity(nodes.len());
        let mut integral = 0.0;
        let mut slot = 0;
        let sq_h = h.sqrt();
        for i in 0..=steps {
            while slot < nodes.len() && nodes[slot] == i {
                rec.push(DVector::from_iterator(n, (0..n).map(|c| phi.node(i)[c] + se * y[c])));
                slot += 1;
            }
            shifted(i, &y, &mut k1, &mut tmp);
            // ⟨N(φ+√εY) − N(φ) − √ε∇N Y, θ⟩ = √ε ⟨k1 − ∇N Y, θ⟩
            jac(i, &y, &mut jy);
            let g: f64 = (0..n).map(|c| (k1[c] - jy[c]) * theta.node(i)[c]).sum();
            integral += w[i] * se * g;
            if i == steps {
                break;
            }
            dw.iter_mut().for_each(|v| *v = sq_h * standard_normal(&mut rng));
            spec.sigma_apply(&dw, &mut noise);
            st.step(h, &mut y, &k1, &noise, |yy, out| shifted(i + 1, yy, out, &mut tmp2));
        }
        for (c, v) in tmp.iter_mut().enumerate() {
            *v = phi_t[c] + se * y[c];
        }
        let f_end = spec.observable(&tmp);
        if !f_end.is_finite() || ((f_end - f_t) / se).abs() >= cfg.conditioning_tolerance {
            return None;
        }
        let lin: f64 = (0..n).map(|c| grad_t[c] * y[c]).sum();
        let log_w = (integral + lambda * (f_end - f_t - se * lin)) / cfg.eps;
        Some((rec, log_w))
    };

    let batch = 4096u64;
    let mut out = ConditionedSamples {
        nodes: nodes.clone(),
        states: Vec::new(),
        log_weights: Vec::new(),
        attempted: 0,
        accepted: 0,
        overflowed: 0,
    };
    let mut next = 0u64;
    while (out.states.len()) < cfg.sample_count {
        if next >= cfg.max_attempts as u64 {
            return Err(Error::NonConvergence {
                iterations: next as usize,
                message: format!("only {} of {} conditioned paths accepted", out.states.len(), cfg.sample_count),
            });
        }
        let end = (next + batch).min(cfg.max_attempts as u64);
        let found: Vec<(u64, Option<(Vec<DVector<f64>>, f64)>)> =
            (next..end).into_par_iter().map(|k| (k, simulate(k))).collect();
        for (k, res) in found {
            if out.states.len() == cfg.sample_count {
                break;
            }
            out.attempted = k + 1;
            if let Some((rec, lw)) = res {
                out.accepted += 1;
                if lw.is_finite() && lw < 700.0 {
                    out.states.push(rec);
                    out.log_weights.push(lw);
                } else {
                    out.overflowed += 1;
                }
            }
        }
        next = end;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instanton::{solve_instanton, InstantonConfig};
    use crate::problems::{make_model2d, make_ou};
    use crate::propagate::IntegratorConfig;

    #[test]
    fn wilson_closed_forms() {
        let (lo, hi) = wilson_interval(0, 100, 0.95).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 0.0370).abs() < 1e-4, "{hi}");
        assert_eq!(wilson_interval(7, 7, 0.95).unwrap().1, 1.0);
        let (lo, hi) = wilson_interval(100, 12_000_000, 0.95).unwrap();
        assert!(lo < 8.3e-6 && hi > 8.3e-6);
        assert!((hi - lo - 3.3e-6).abs() < 0.1e-6, "{}", hi - lo);
        assert!(wilson_interval(1, 0, 0.95).is_err());
        assert!(wilson_interval(3, 2, 0.95).is_err());
        let (_, hi) = wilson_interval(0, 10_000, 0.95).unwrap();
        assert!((hi - 3.84e-4).abs() < 0.01e-4, "{hi}");
    }

    #[test]
    fn direct_mc_is_reproducible_and_rare_event_free_at_small_noise() {
        let m = make_model2d();
        let cfg = McConfig {
            eps: 0.01,
            sample_count: 2_000,
            dt: 1e-2,
            ..Default::default()
        };
        let a = direct_tail_mc(&m, &cfg).unwrap();
        assert_eq!(a.hits, 0);
        let cfg = McConfig { eps: 2.0, ..cfg };
        let (b, c) = (direct_tail_mc(&m, &cfg).unwrap(), direct_tail_mc(&m, &cfg).unwrap());
        assert_eq!(b.hits, c.hits);
        assert!(b.hits > 0);
    }

    fn ou_tail(dt: f64, scheme: SdeScheme) -> TailMcResult {
        let ou = make_ou(1.0, 1.0).unwrap();
        direct_tail_mc(
            &ou,
            &McConfig {
                eps: 0.25,
                threshold: 1.0,
                sample_count: 100_000,
                dt,
                scheme,
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn ou_frequency_brackets_exact_tail() {
        let ou = make_ou(1.0, 1.0).unwrap();
        let exact = ou.exact_tail(1.0, 0.25);
        for scheme in [SdeScheme::EulerMaruyamaIf, SdeScheme::Heun] {
            let r = ou_tail(0.01, scheme);
            assert!(r.interval.0 <= exact && exact <= r.interval.1, "{:?} {exact}", r.interval);
        }
        let (a, b) = (ou_tail(0.02, SdeScheme::Heun), ou_tail(0.01, SdeScheme::Heun));
        let se = (b.frequency * (1.0 - b.frequency) / b.samples as f64).sqrt();
        assert!((a.frequency - b.frequency).abs() < se, "{} {}", a.frequency, b.frequency);
    }

    #[test]
    fn ou_conditioned_weights_are_trivial() {
        let ou = make_ou(1.0, 1.0).unwrap();
        let inst = solve_instanton(
            &ou,
            &InstantonConfig {
                z_target: 1.0,
                n_t: 100,
                integrator: IntegratorConfig::euler(),
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = McConfig {
            eps: 0.25,
            sample_count: 200,
            dt: 0.01,
            threshold: 1.0,
            ..Default::default()
        };
        let s = importance_sampled_paths(&ou, &inst, &[0.5, 1.0], &cfg).unwrap();
        assert_eq!(s.states.len(), 200);
        assert!(s.log_weights.iter().all(|&l| l.abs() < 1e-10));
        assert!(s.attempted > 200);
        for st in &s.states {
            assert!(((st[1][0] - 1.0) / 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn ou_importance_sampling_matches_exact_tail() {
        let ou = make_ou(1.0, 1.0).unwrap();
        let inst = solve_instanton(
            &ou,
            &InstantonConfig {
                z_target: 1.0,
                n_t: 200,
                integrator: IntegratorConfig::euler(),
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = McConfig {
            eps: 0.05,
            sample_count: 20_000,
            dt: 1.0 / 200.0,
            threshold: 1.0,
            scheme: SdeScheme::Heun,
            ..Default::default()
        };
        let r = importance_sampled_tail(&ou, &inst, &cfg).unwrap();
        let exact = ou.exact_tail(1.0, 0.05);
        assert!(r.std_error < 0.05 * r.estimate);
        assert!((r.estimate / exact - 1.0).abs() < 0.03, "{} {exact}", r.estimate);
    }
}
