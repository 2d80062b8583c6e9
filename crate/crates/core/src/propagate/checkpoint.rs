//! Memory-bounded reversal of the forward sweep.
//!
//! The second-order adjoint sweep needs `(φ_i, γ_i)` at every step in
//! reverse order. Instead of storing all of them, a [`CheckpointPlan`]
//! keeps at most `budget` snapshots and recomputes the rest from the
//! nearest stored one. Splits follow the binomial schedule: with `s`
//! snapshots and `t` sweeps, `C(s + t, s)` steps can be reversed.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::path::Path;
use crate::problem::ProblemSpec;

use super::scheme::{IntegratorConfig, ReverseOut, Stepper};
use super::{check_noise, finite_or, Buffers, Forcing};

/// `C(s + t, s)`, saturating.
fn beta(s: usize, t: usize) -> u128 {
    let mut acc: u128 = 1;
    for k in 1..=t.min(s) as u128 {
        let big = (s.max(t)) as u128;
        acc = acc.saturating_mul(big + k) / k;
        if acc > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPlan {
    n_steps: usize,
    budget: usize,
    stored_indices: Vec<usize>,
}

/// What a checkpointed reversal actually did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CheckpointStats {
    /// Largest number of snapshots held at once, including the initial state.
    pub peak_snapshots: usize,
    /// Forward steps evaluated, including recomputation.
    pub forward_steps: usize,
}

impl CheckpointPlan {
    /// Plan for reversing `grid` with at most `budget` stored snapshots.
    ///
    /// The budget must be at least 2 and large enough that the number of
    /// repeated forward sweeps stays logarithmic, i.e. at least
    /// [`CheckpointPlan::minimal_budget`].
    pub fn new(grid: &TimeGrid, budget: usize) -> Result<Self> {
        let n_steps = grid.n_intervals();
        let need = Self::minimal_budget(n_steps);
        if budget < need {
            return Err(Error::Plan(format!(
                "budget {budget} too small for {n_steps} steps; at least {need} snapshots needed"
            )));
        }
        let mut stored_indices = vec![0];
        let (mut a, mut s) = (0usize, budget);
        while n_steps - a > 1 && s > 1 {
            let m = split(n_steps - a, s);
            a += m;
            s -= 1;
            stored_indices.push(a);
        }
        Ok(Self {
            n_steps,
            budget,
            stored_indices,
        })
    }

    /// `⌈log₂ n⌉ + 1`, the depth of a bisection; below this the number of
    /// sweeps grows faster than logarithmically.
    pub fn minimal_budget(n_steps: usize) -> usize {
        let mut d = 0;
        while (1usize << d) < n_steps {
            d += 1;
        }
        (d + 1).max(2)
    }

    /// Plan with the minimal logarithmic budget.
    pub fn logarithmic(grid: &TimeGrid) -> Self {
        Self::new(grid, Self::minimal_budget(grid.n_intervals())).expect("minimal budget is valid")
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Node indices holding snapshots right before the first backward step.
    pub fn stored_indices(&self) -> &[usize] {
        &self.stored_indices
    }

    /// Largest number of forward evaluations of any single step.
    pub fn sweeps(&self) -> usize {
        repetitions(self.n_steps, self.budget)
    }
}

fn repetitions(l: usize, s: usize) -> usize {
    let mut t = 1;
    while beta(s, t) < l as u128 {
        t += 1;
    }
    t
}

/// Length of the left part when reversing `l` steps with `s ≥ 2` snapshots.
fn split(l: usize, s: usize) -> usize {
    let t = repetitions(l, s);
    let right = beta(s - 1, t);
    let m = if (l as u128) > right {
        l - right as usize
    } else {
        1
    };
    m.clamp(1, l - 1)
}

/// Generic reversal driver.
struct Reversal<'f, S> {
    forward: &'f mut dyn FnMut(usize, &S) -> Result<S>,
    backward: &'f mut dyn FnMut(usize, &S) -> Result<()>,
    live: usize,
    stats: CheckpointStats,
}

impl<S: Clone> Reversal<'_, S> {
    fn advance(&mut self, from: usize, to: usize, state: &S) -> Result<S> {
        let mut s = state.clone();
        for i in from..to {
            s = (self.forward)(i, &s)?;
            self.stats.forward_steps += 1;
        }
        Ok(s)
    }

    /// Calls `backward(j, state_j)` for `j = b-1, …, a` given the snapshot at `a`.
    fn run(&mut self, a: usize, b: usize, state_a: &S, s: usize) -> Result<()> {
        let l = b - a;
        if l == 1 {
            return (self.backward)(a, state_a);
        }
        if s <= 1 {
            for j in (a..b).rev() {
                let st = self.advance(a, j, state_a)?;
                (self.backward)(j, &st)?;
            }
            return Ok(());
        }
        let m = split(l, s);
        let mid = self.advance(a, a + m, state_a)?;
        self.live += 1;
        self.stats.peak_snapshots = self.stats.peak_snapshots.max(self.live);
        self.run(a + m, b, &mid, s - 1)?;
        drop(mid);
        self.live -= 1;
        self.run(a, a + m, state_a, s)
    }
}

/// Hessian of `λ F` at `η` applied to `δη` (`σᵀζ`), with the forward
/// quantities `(φ, γ)` replayed from at most `plan.budget()` snapshots.
///
/// Produces the same floating-point result as composing
/// [`super::solve_linearized_pair`] with `σᵀ`.
pub fn checkpointed_apply(
    spec: &dyn ProblemSpec,
    eta: &Path,
    lambda: f64,
    delta: &Path,
    plan: &CheckpointPlan,
    cfg: &IntegratorConfig,
) -> Result<(Path, CheckpointStats)> {
    check_noise(spec, eta)?;
    check_noise(spec, delta)?;
    let grid = eta.grid().clone();
    if !delta.grid().same_as(&grid) {
        return Err(Error::Dimension("perturbation lives on a different grid".into()));
    }
    if plan.n_steps() != grid.n_intervals() {
        return Err(Error::Plan(format!(
            "plan covers {} steps, grid has {}",
            plan.n_steps(),
            grid.n_intervals()
        )));
    }
    let n = spec.state_dim();
    let r = spec.noise_rank();
    let nt = grid.n_intervals();
    let force = Forcing::new(spec, eta);
    let dforce = Forcing::new(spec, delta);

    // state = [φ_i, γ_i]
    let mut fst = Stepper::new(spec, cfg);
    let mut fbuf = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let grid_f = grid.clone();
    let mut forward = |i: usize, s: &Vec<f64>| -> Result<Vec<f64>> {
        let (sa, sb, dsa, dsb) = &mut fbuf;
        force.at(i, sa);
        force.at(i + 1, sb);
        dforce.at(i, dsa);
        dforce.at(i + 1, dsb);
        let h = grid_f.step(i);
        let mut out = vec![0.0; 2 * n];
        let (x, g) = s.split_at(n);
        let (ox, og) = out.split_at_mut(n);
        fst.forward(h, x, sa, sb, ox);
        fst.tangent(h, x, g, sa, dsa, dsb, og);
        finite_or(&out, i + 1, "state")?;
        Ok(out)
    };

    let mut s0 = spec.initial_state();
    s0.extend(std::iter::repeat(0.0).take(n));

    // terminal values from an unstored sweep
    let mut sweep_steps = 0;
    let mut end = s0.clone();
    for i in 0..nt {
        end = forward(i, &end)?;
        sweep_steps += 1;
    }
    let (phi_t, gamma_t) = end.split_at(n);
    let mut p = vec![0.0; n];
    spec.observable_gradient(phi_t, &mut p);
    p.iter_mut().for_each(|v| *v *= lambda);
    let mut z = vec![0.0; n];
    spec.observable_hessian_action(phi_t, gamma_t, &mut z);
    z.iter_mut().for_each(|v| *v *= lambda);
    let z_terminal = z.clone();

    let mut out = Path::zeros(grid.clone(), r);
    let w = grid.weights().to_vec();
    let mut bst = Stepper::new(spec, cfg);
    let mut b = Buffers::new(n);
    // pending left contribution of the step processed last, i.e. dca_{i+1}
    let mut pending = vec![0.0; n];
    let mut node = vec![0.0; n];
    let grid_b = grid.clone();
    let mut backward = |i: usize, s: &Vec<f64>| -> Result<()> {
        let (x, g) = s.split_at(n);
        force.at(i, &mut b.sa);
        dforce.at(i, &mut b.dsa);
        bst.reverse_second(
            grid_b.step(i),
            x,
            g,
            &b.sa,
            &b.dsa,
            &p,
            &z,
            ReverseOut {
                p: &mut b.p_prev,
                ca: &mut b.ca,
                cb: &mut b.cb,
            },
            ReverseOut {
                p: &mut b.z_prev,
                ca: &mut b.dca,
                cb: &mut b.dcb,
            },
        );
        finite_or(&b.z_prev, i, "second-order adjoint")?;
        // node i+1 is complete now
        if i + 1 == nt {
            node.copy_from_slice(&z_terminal);
        } else {
            let wi = w[i + 1];
            for k in 0..n {
                node[k] = (pending[k] + b.dcb[k]) / wi;
            }
        }
        spec.sigma_adjoint(&node, out.node_mut(i + 1));
        pending.copy_from_slice(&b.dca);
        if i == 0 {
            let w0 = w[0];
            for k in 0..n {
                node[k] = pending[k] / w0;
            }
            spec.sigma_adjoint(&node, out.node_mut(0));
        }
        std::mem::swap(&mut p, &mut b.p_prev);
        std::mem::swap(&mut z, &mut b.z_prev);
        Ok(())
    };

    let mut rev = Reversal {
        forward: &mut forward,
        backward: &mut backward,
        live: 1,
        stats: CheckpointStats {
            peak_snapshots: 1,
            forward_steps: 0,
        },
    };
    rev.run(0, nt, &s0, plan.budget())?;
    let mut stats = rev.stats;
    stats.forward_steps += sweep_steps;
    Ok((out, stats))
}
