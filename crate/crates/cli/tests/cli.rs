use std::path::Path;
use std::process::Command;

use sharpldt_cli::{export_plot_data, run_pipeline, ArtifactManifest, Plot, RunConfig, Target};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sharpldt"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const OU: &str = r#"{
    "problem": {"kind": "ou", "relaxation": 1.0, "horizon": 1.0},
    "z": 1.0,
    "eps": [0.01, 0.25],
    "instanton": {"n_t": 400, "integrator": {"scheme": "rk2_if"}},
    "spectrum": {"m": 4},
    "tube": {"enabled": true, "times": [0.5, 1.0]},
    "seed": 3
}"#;

#[test]
fn invalid_key_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", r#"{"problem": {"kind": "ou"}, "z": 1.0, "spectrum": {"m": 4, "tolerance": 1}}"#);
    let out = tmp.path().join("run");
    let status = bin()
        .args(["pipeline", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("tolerance"));
    assert!(!out.exists());
}

#[test]
fn ou_pipeline_matches_closed_forms_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write(tmp.path(), "ou.json", OU);
    let out = tmp.path().join("run");
    let run = bin()
        .args(["pipeline", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"])
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let m = ArtifactManifest::load(&out).unwrap();
    assert!(m.failure.is_none());
    let p = &m.points[0];
    let sigma = (1.0 - (-2.0f64).exp()) / 2.0;
    assert!((p.rate.unwrap() - 1.0 / (2.0 * sigma)).abs() < 1e-5);
    let cf = 1.0 / (2.0 * p.rate.unwrap()).sqrt();
    assert!((p.prefactor_fredholm.unwrap() - cf).abs() < 1e-6);
    assert!((p.prefactor_riccati.unwrap() - 0.657458).abs() < 1e-4);
    assert!((p.determinant.unwrap().det - 1.0).abs() < 1e-6);
    assert_eq!(p.estimates.len(), 2);

    // Final-time tube covariance vanishes; the midpoint one is positive.
    let cov = m.array(&out, "z0/tube_covariance").unwrap();
    assert!(cov[0] > 0.0 && cov[1].abs() < 1e-8);

    // Second run: every cached stage is reused and the scalars agree bit for bit.
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let again = run_pipeline(&cfg, &out, Target::Pipeline).unwrap();
    assert_eq!(again.config_hash, m.config_hash);
    assert_eq!(serde_json::to_string(&again.points).unwrap(), serde_json::to_string(&m.points).unwrap());
    let statuses: Vec<_> = again.stages.iter().map(|s| (s.name.as_str(), s.status.as_str())).collect();
    assert!(statuses.contains(&("instanton", "cached")) && statuses.contains(&("spectrum", "cached")));

    // Arrays read back identical to the cached ones.
    for e in &m.arrays {
        let a = m.array(&out, &e.name).unwrap();
        let b = again.array(&out, &e.name).unwrap();
        assert_eq!(a.len(), e.shape.iter().product::<usize>());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", e.name);
    }

    let files = export_plot_data(&m, &out, Plot::EigenDecay).unwrap();
    let text = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(text.lines().next().unwrap(), "i,abs_mu,sign");
    assert_eq!(text.lines().count(), 5);
    let export = bin().args(["export", "--out", out.to_str().unwrap(), "--which", "tail-vs-z"]).output().unwrap();
    assert!(export.status.success());
    let tail = std::fs::read_to_string(out.join("export/tail_vs_z.csv")).unwrap();
    assert_eq!(tail.lines().count(), 3);
}

#[test]
fn missing_arrays_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_json(r#"{"problem": {"kind": "ou"}, "z": 1.0, "instanton": {"n_t": 100}}"#).unwrap();
    let m = run_pipeline(&cfg, tmp.path(), Target::Instanton).unwrap();
    let err = export_plot_data(&m, tmp.path(), Plot::EigenDecay).unwrap_err();
    assert!(err.to_string().contains("z0/eigenvalues"), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert_eq!(m.points[0].prefactor_fredholm, None);
}

#[test]
fn model2d_pipeline_reproduces_reference_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_json(
        r#"{
            "problem": {"kind": "model2d"},
            "z": 3.0,
            "eps": [0.5],
            "instanton": {"n_t": 2000, "integrator": {"scheme": "euler_if"}},
            "spectrum": {"m": 200}
        }"#,
    )
    .unwrap();
    let m = run_pipeline(&cfg, tmp.path(), Target::Estimate).unwrap();
    let p = &m.points[0];
    let det = p.determinant.unwrap().det;
    assert!((det / 1.0397 - 1.0).abs() < 5e-3, "{det}");
    let tail = p.estimates[0].tail;
    assert!((tail / 8.94e-6 - 1.0).abs() < 1e-2, "{tail}");
    let (cf, cr) = (p.prefactor_fredholm.unwrap(), p.prefactor_riccati.unwrap());
    assert!((cf - cr).abs() / cf < 1e-3);
    let files = export_plot_data(&m, tmp.path(), Plot::DetConvergence).unwrap();
    assert_eq!(std::fs::read_to_string(&files[0]).unwrap().lines().count(), 201);
}

#[test]
fn numerical_failure_is_recorded_in_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_json(
        r#"{"problem": {"kind": "model2d"}, "z": 3.0, "instanton": {"n_t": 200, "max_iters": 2}}"#,
    )
    .unwrap();
    let err = run_pipeline(&cfg, tmp.path(), Target::Pipeline).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let m = ArtifactManifest::load(tmp.path()).unwrap();
    let f = m.failure.unwrap();
    assert_eq!(f.stage, "instanton");
    assert_eq!(f.exit_code, 3);
}
