//! Invariants of the second-variation operator and the estimators on
//! random inputs.

use std::sync::OnceLock;

use proptest::prelude::*;
use sharpldt::problems::{make_model2d, Model2d};
use sharpldt::*;

const N_T: usize = 100;

fn setup() -> &'static (Model2d, InstantonResult) {
    static CELL: OnceLock<(Model2d, InstantonResult)> = OnceLock::new();
    CELL.get_or_init(|| {
        let m = make_model2d();
        let inst = solve_instanton(
            &m,
            &InstantonConfig {
                z_target: 3.0,
                n_t: N_T,
                ..Default::default()
            },
        )
        .unwrap();
        (m, inst)
    })
}

fn path(values: Vec<f64>) -> Path {
    let (_, inst) = setup();
    Path::from_values(inst.grid().clone(), 2, values).unwrap()
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 2 * (N_T + 1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_is_symmetric(u in values(), v in values()) {
        let (m, inst) = setup();
        let op = SecondVariationOperator::new(m, inst).unwrap();
        let (u, v) = (path(u), path(v));
        let (au, av) = (op.apply(&u).unwrap(), op.apply(&v).unwrap());
        let scale = u.norm() * av.norm() + au.norm() * v.norm();
        prop_assert!((u.inner(&av).unwrap() - au.inner(&v).unwrap()).abs() <= 1e-10 * scale);
    }

    #[test]
    fn operator_range_is_orthogonal_to_instanton(u in values()) {
        let (m, inst) = setup();
        let op = SecondVariationOperator::new(m, inst).unwrap();
        let au = op.apply(&path(u)).unwrap();
        prop_assert!(au.inner(&inst.eta).unwrap().abs() <= 1e-10 * au.norm() * inst.eta.norm());
    }

    #[test]
    fn projection_is_idempotent(u in values()) {
        let (m, inst) = setup();
        let op = SecondVariationOperator::new(m, inst).unwrap();
        let pu = op.project(&path(u)).unwrap();
        let ppu = op.project(&pu).unwrap();
        prop_assert!(ppu.max_abs_diff(&pu).unwrap() <= 1e-12 * pu.norm().max(1.0));
    }

    #[test]
    fn checkpointing_is_exact_for_any_budget(u in values(), budget in 8usize..60) {
        let (m, inst) = setup();
        let u = path(u);
        let direct = SecondVariationOperator::new(m, inst).unwrap().apply(&u).unwrap();
        let budget = budget.max(CheckpointPlan::minimal_budget(N_T));
        let plan = CheckpointPlan::new(inst.grid(), budget).unwrap();
        let op = SecondVariationOperator::new(m, inst).unwrap().with_checkpointing(plan).unwrap();
        let cp = op.apply(&u).unwrap();
        prop_assert!(cp.max_abs_diff(&direct).unwrap() <= 1e-12 * direct.norm().max(1.0));
        prop_assert!(op.peak_snapshots() <= budget);
    }

    #[test]
    fn gradient_matches_directional_difference(d in values()) {
        let (m, inst) = setup();
        let cfg = inst.integrator;
        let dir = path(d);
        let g = gradient(m, &inst.eta, 1.0, &cfg).unwrap();
        let h = 1e-4;
        let f = |s: f64| {
            let mut e = inst.eta.clone();
            e.axpy(s * h, &dir).unwrap();
            sharpldt::propagate::observable_of(m, &e, &cfg).unwrap()
        };
        let fd = (f(1.0) - f(-1.0)) / (2.0 * h);
        let exact = g.inner(&dir).unwrap();
        prop_assert!((fd - exact).abs() <= 1e-6 * (exact.abs() + g.norm() * dir.norm()));
    }

    #[test]
    fn wilson_interval_contains_frequency(n in 1u64..10_000_000, frac in 0.0f64..=1.0, conf in 0.5f64..0.999) {
        let hits = ((n as f64) * frac).floor() as u64;
        let (lo, hi) = wilson_interval(hits, n, conf).unwrap();
        let p = hits as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
    }

    #[test]
    fn tail_and_density_share_the_exponent(rate in 0.1f64..50.0, lambda in 0.1f64..20.0, cf in 0.01f64..10.0, eps in 0.01f64..2.0) {
        let tail = tail_probability(rate, cf, eps).unwrap();
        let pdf = pdf_estimate(rate, lambda, cf, eps).unwrap();
        // ρ / P = λ/ε, the Laplace relation between density and tail.
        prop_assert!((pdf.ln - tail.ln - (lambda / eps).ln()).abs() <= 1e-10);
    }

    #[test]
    fn determinant_is_product_over_kept_eigenvalues(mut mus in prop::collection::vec(-5.0f64..0.99, 1..40)) {
        mus.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
        let d = fredholm_determinant(&mus, 0.0).unwrap();
        let direct: f64 = mus.iter().filter(|m| m.abs() > 0.0).map(|m| 1.0 - m).product();
        prop_assert!((d.det - direct).abs() <= 1e-12 * direct.abs().max(1e-300));
    }
}

#[test]
fn lanczos_matches_dense_spectrum() {
    let (m, inst) = setup();
    let op = SecondVariationOperator::new(m, inst).unwrap();
    let dense = sharpldt::spectrum::dense_eigenvalues(&sharpldt::spectrum::assemble_dense(&op).unwrap());
    let sr = dominant_eigenpairs(&op, 10, &SpectrumConfig::default()).unwrap();
    for (a, b) in sr.eigenvalues.iter().zip(&dense) {
        assert!((a - b).abs() <= 1e-9 * dense[0].abs(), "{a} vs {b}");
    }
}
