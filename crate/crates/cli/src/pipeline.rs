//! Staged runs: instanton → spectrum → estimate → Riccati → tube → sampling.
//!
//! Every stage persists its output under `stages/` as soon as it finishes,
//! keyed by a hash of the configuration sections it depends on, so a later
//! run with the same sections reuses it. The manifest is written last.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sharpldt::sampling::{direct_tail_mc, importance_sampled_paths, importance_sampled_tail, McConfig};
use sharpldt::{
    build_tube, dominant_eigenpairs, final_time_covariance_riccati, prefactor_fredholm, prefactor_riccati,
    solve_instanton, solve_instanton_from, solve_riccati, FredholmDeterminant, InstantonResult, LogValue,
    ProblemSpec, SecondVariationOperator, SpectrumResult, TimeGrid, TubeConfig,
};

use crate::artifact::{find, read_array, read_json, write_json, ArrayEntry, BlobWriter, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Instanton,
    Spectrum,
    Riccati,
    Estimate,
    Tube,
    Sample,
    Pipeline,
}

impl Target {
    fn wants(self, stage: &str, cfg: &RunConfig) -> bool {
        use Target::*;
        let (spec_on, ric_on) = (cfg.spectrum.enabled, cfg.riccati.enabled);
        match stage {
            "instanton" => true,
            "spectrum" => match self {
                Spectrum | Tube => true,
                Estimate | Pipeline => spec_on,
                _ => false,
            },
            "riccati" => match self {
                Riccati => true,
                Estimate | Pipeline => ric_on,
                _ => false,
            },
            "estimate" => matches!(self, Estimate | Pipeline),
            "tube" => self == Tube || (self == Pipeline && cfg.tube.enabled),
            "sample" => self == Sample || (self == Pipeline && cfg.sampling.enabled),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub z_index: usize,
    pub key: String,
    /// `computed`, `cached` or `failed`.
    pub status: String,
    pub diagnostics: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsEstimate {
    pub eps: f64,
    pub tail: f64,
    pub log10_tail: f64,
    pub pdf: f64,
    pub log10_pdf: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub eps: f64,
    pub direct: Option<sharpldt::sampling::TailMcResult>,
    pub importance: Option<sharpldt::sampling::IsTailResult>,
    pub conditioned_attempted: Option<u64>,
    pub conditioned_accepted: Option<u64>,
    pub conditioned_overflowed: Option<u64>,
    pub conditioned_ess: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PointResult {
    pub z: f64,
    pub rate: Option<f64>,
    pub lambda: Option<f64>,
    pub obs_residual: Option<f64>,
    pub stationarity: Option<f64>,
    pub iterations: Option<usize>,
    pub determinant: Option<FredholmDeterminant>,
    pub matvec_count: Option<usize>,
    pub prefactor_fredholm: Option<f64>,
    pub prefactor_riccati: Option<f64>,
    pub riccati_trace_integral: Option<f64>,
    /// Estimates use the Fredholm prefactor when available.
    pub estimates: Vec<EpsEstimate>,
    pub sampling: Option<McSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub z_index: usize,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub run_id: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub format_version: u32,
    pub package_version: String,
    pub points: Vec<PointResult>,
    pub stages: Vec<StageRecord>,
    pub arrays: Vec<ArrayEntry>,
    pub failure: Option<Failure>,
}

impl ArtifactManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        read_json(&dir.join("manifest.json"))
    }

    pub fn array(&self, dir: &Path, name: &str) -> CliResult<Vec<f64>> {
        read_array(dir, find(&self.arrays, name)?)
    }

    pub fn entry(&self, name: &str) -> CliResult<&ArrayEntry> {
        find(&self.arrays, name)
    }
}

/// Stage output as stored under `stages/`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageFile<S> {
    stage: String,
    key: String,
    scalars: S,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstantonScalars {
    z: f64,
    lambda: f64,
    rate: f64,
    obs_residual: f64,
    stationarity: f64,
    iterations: usize,
    evaluations: usize,
    converged: bool,
    message: String,
    start_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpectrumScalars {
    matvec_count: usize,
    restarts: usize,
    seed: u64,
    converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RiccatiScalars {
    trace_integral: f64,
    prefactor: f64,
    max_asymmetry: f64,
    singularity_events: Vec<(f64, f64)>,
}

struct Run<'c> {
    cfg: &'c RunConfig,
    dir: PathBuf,
    spec: Box<dyn ProblemSpec>,
    grid: Arc<TimeGrid>,
    stages: Vec<StageRecord>,
    arrays: Vec<ArrayEntry>,
    points: Vec<PointResult>,
}

fn short(key: &str) -> &str {
    &key[..16]
}

impl<'c> Run<'c> {
    fn stage_path(&self, name: &str, k: usize, key: &str, ext: &str) -> (String, PathBuf) {
        let rel = format!("stages/{name}-z{k}-{}.{ext}", short(key));
        let abs = self.dir.join(&rel);
        (rel, abs)
    }

    fn record(&mut self, name: &str, k: usize, key: &str, status: &str, arrays: &[ArrayEntry]) {
        self.stages.push(StageRecord {
            name: name.into(),
            z_index: k,
            key: key.into(),
            status: status.into(),
            diagnostics: None,
        });
        let prefix = format!("z{k}/");
        self.arrays.extend(arrays.iter().cloned().map(|mut e| {
            e.name = format!("{prefix}{}", e.name);
            e
        }));
    }

    fn cached<S: for<'de> Deserialize<'de>>(&self, name: &str, k: usize, key: &str) -> Option<StageFile<S>> {
        let (_, path) = self.stage_path(name, k, key, "json");
        let file: StageFile<S> = read_json(&path).ok()?;
        (file.key == key).then_some(file)
    }

    fn store<S: Serialize>(&self, name: &str, k: usize, key: &str, scalars: S, blob: BlobWriter) -> CliResult<StageFile<S>> {
        let arrays = blob.finish(&self.dir)?;
        let file = StageFile {
            stage: name.into(),
            key: key.into(),
            scalars,
            arrays,
        };
        let (_, path) = self.stage_path(name, k, key, "json");
        write_json(&path, &file)?;
        Ok(file)
    }

    fn blob(&self, name: &str, k: usize, key: &str) -> BlobWriter {
        BlobWriter::new(self.stage_path(name, k, key, "f64").0)
    }

    fn instanton_key(&self, k: usize) -> String {
        let zs = self.cfg.z_values();
        let tag = format!("{}|{:?}", self.cfg.section_hash(&["problem", "instanton"]), &zs[..=k]);
        crate::config::sha256_hex(tag.as_bytes())
    }

    fn derived_key(&self, base: &str, sections: &[&str]) -> String {
        crate::config::sha256_hex(format!("{base}|{}", self.cfg.section_hash(sections)).as_bytes())
    }

    fn instanton(&mut self, k: usize, warm: Option<&InstantonResult>) -> CliResult<InstantonResult> {
        let key = self.instanton_key(k);
        let n_nodes = self.grid.n_nodes();
        let (n, r) = (self.spec.state_dim(), self.spec.noise_rank());
        if let Some(file) = self.cached::<InstantonScalars>("instanton", k, &key) {
            let load = |name: &str, width: usize| -> CliResult<sharpldt::Path> {
                let v = read_array(&self.dir, find(&file.arrays, name)?)?;
                sharpldt::Path::from_values(self.grid.clone(), width, v).map_err(|e| CliError::Artifact(e.to_string()))
            };
            let s = &file.scalars;
            let res = InstantonResult {
                z: s.z,
                eta: load("eta", r)?,
                phi: load("phi", n)?,
                theta: load("theta", n)?,
                lambda: s.lambda,
                rate: s.rate,
                obs_residual: s.obs_residual,
                stationarity: s.stationarity,
                iterations: s.iterations,
                evaluations: s.evaluations,
                grad_norm_history: read_array(&self.dir, find(&file.arrays, "grad_norm_history")?)?,
                converged: s.converged,
                message: s.message.clone(),
                integrator: self.cfg.instanton.integrator,
                start_index: s.start_index,
            };
            self.record("instanton", k, &key, "cached", &file.arrays);
            return Ok(res);
        }
        let mut c = self.cfg.instanton.clone();
        c.z_target = self.cfg.z_values()[k];
        let res = match warm {
            Some(w) => solve_instanton_from(self.spec.as_ref(), &c, w.eta.clone(), w.lambda),
            None => solve_instanton(self.spec.as_ref(), &c),
        }
        .and_then(|r| r.require_converged())
        .map_err(CliError::stage("instanton"))?;
        let mut blob = self.blob("instanton", k, &key);
        blob.push("grid", &[n_nodes], self.grid.nodes())?;
        blob.push("eta", &[n_nodes, r], res.eta.values())?;
        blob.push("phi", &[n_nodes, n], res.phi.values())?;
        blob.push("theta", &[n_nodes, n], res.theta.values())?;
        blob.push("grad_norm_history", &[res.grad_norm_history.len()], &res.grad_norm_history)?;
        let scalars = InstantonScalars {
            z: res.z,
            lambda: res.lambda,
            rate: res.rate,
            obs_residual: res.obs_residual,
            stationarity: res.stationarity,
            iterations: res.iterations,
            evaluations: res.evaluations,
            converged: res.converged,
            message: res.message.clone(),
            start_index: res.start_index,
        };
        let file = self.store("instanton", k, &key, scalars, blob)?;
        self.record("instanton", k, &key, "computed", &file.arrays);
        Ok(res)
    }

    fn spectrum(&mut self, k: usize, inst: &InstantonResult) -> CliResult<SpectrumResult> {
        let key = self.derived_key(&self.instanton_key(k), &["spectrum"]);
        let m = self.cfg.spectrum.m;
        let r = self.spec.noise_rank();
        let n_nodes = self.grid.n_nodes();
        if let Some(file) = self.cached::<SpectrumScalars>("spectrum", k, &key) {
            let get = |name: &str| read_array(&self.dir, find(&file.arrays, name)?);
            let vecs = get("eigenvectors")?;
            let eigenvectors = vecs
                .chunks(n_nodes * r)
                .map(|c| sharpldt::Path::from_values(self.grid.clone(), r, c.to_vec()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Artifact(e.to_string()))?;
            let s = &file.scalars;
            let sr = SpectrumResult {
                eigenvalues: get("eigenvalues")?,
                eigenvectors,
                partial_products: get("partial_products")?,
                residuals: get("residuals")?,
                matvec_count: s.matvec_count,
                restarts: s.restarts,
                seed: s.seed,
                converged: s.converged,
            };
            self.record("spectrum", k, &key, "cached", &file.arrays);
            return Ok(sr);
        }
        let op = SecondVariationOperator::new(self.spec.as_ref(), inst).map_err(CliError::stage("spectrum"))?;
        let sr = dominant_eigenpairs(&op, m, &self.cfg.spectrum.solver).map_err(CliError::stage("spectrum"))?;
        let mut blob = self.blob("spectrum", k, &key);
        let mm = sr.eigenvalues.len();
        blob.push("eigenvalues", &[mm], &sr.eigenvalues)?;
        blob.push("partial_products", &[mm], &sr.partial_products)?;
        blob.push("residuals", &[mm], &sr.residuals)?;
        let flat: Vec<f64> = sr.eigenvectors.iter().flat_map(|v| v.values().iter().copied()).collect();
        blob.push("eigenvectors", &[mm, n_nodes, r], &flat)?;
        let scalars = SpectrumScalars {
            matvec_count: sr.matvec_count,
            restarts: sr.restarts,
            seed: sr.seed,
            converged: sr.converged,
        };
        let file = self.store("spectrum", k, &key, scalars, blob)?;
        self.record("spectrum", k, &key, "computed", &file.arrays);
        Ok(sr)
    }

    fn riccati(&mut self, k: usize, inst: &InstantonResult) -> CliResult<RiccatiScalars> {
        let key = self.derived_key(&self.instanton_key(k), &["riccati"]);
        if let Some(file) = self.cached::<RiccatiScalars>("riccati", k, &key) {
            self.record("riccati", k, &key, "cached", &file.arrays);
            return Ok(file.scalars);
        }
        let mut rc = self.cfg.riccati.solver.clone();
        rc.store_path = Some(false);
        let rr = solve_riccati(self.spec.as_ref(), inst, &rc).map_err(CliError::stage("riccati"))?;
        let prefactor = prefactor_riccati(&rr).map_err(CliError::stage("riccati"))?;
        let cov = final_time_covariance_riccati(&rr).map_err(CliError::stage("riccati"))?;
        let n = rr.q_final.nrows();
        let mut blob = self.blob("riccati", k, &key);
        blob.push("riccati_q_final", &[n, n], &row_major(&rr.q_final))?;
        blob.push("riccati_final_covariance", &[n, n], &row_major(&cov))?;
        let scalars = RiccatiScalars {
            trace_integral: rr.trace_integral,
            prefactor,
            max_asymmetry: rr.max_asymmetry,
            singularity_events: rr.singularity_events.clone(),
        };
        let file = self.store("riccati", k, &key, scalars, blob)?;
        self.record("riccati", k, &key, "computed", &file.arrays);
        Ok(file.scalars)
    }

    fn tube(&mut self, k: usize, inst: &InstantonResult, sr: &SpectrumResult) -> CliResult<()> {
        let grid = inst.grid();
        let nodes: Vec<usize> = self.cfg.tube.times.iter().map(|&t| grid.nearest_node(t)).collect();
        let stride = self
            .cfg
            .tube
            .stride
            .unwrap_or_else(|| nodes.iter().fold(grid.n_intervals(), |g, &a| gcd(g, a)).max(1));
        let tm = build_tube(self.spec.as_ref(), inst, sr, &TubeConfig { stride: Some(stride) })
            .map_err(CliError::stage("tube"))?;
        let n = self.spec.state_dim();
        let (mut times, mut mean, mut cov) = (Vec::new(), Vec::new(), Vec::new());
        for &i in &nodes {
            let c = tm.covariance_nodes(i, i).map_err(CliError::stage("tube"))?;
            times.push(grid.nodes()[i]);
            mean.extend_from_slice(inst.phi.node(i));
            cov.extend(row_major(&c));
        }
        let boundary: Vec<f64> = tm.modes.iter().map(|m| m.boundary_defect).collect();
        let key = self.derived_key(&self.instanton_key(k), &["spectrum", "tube"]);
        let mut blob = self.blob("tube", k, &key);
        let j = times.len();
        blob.push("tube_times", &[j], &times)?;
        blob.push("tube_mean", &[j, n], &mean)?;
        blob.push("tube_covariance", &[j, n, n], &cov)?;
        blob.push("tube_boundary_defect", &[boundary.len()], &boundary)?;
        let file = self.store("tube", k, &key, serde_json::Value::Null, blob)?;
        self.record("tube", k, &key, "computed", &file.arrays);
        Ok(())
    }

    fn sample(&mut self, k: usize, inst: Option<&InstantonResult>) -> CliResult<McSummary> {
        let s = &self.cfg.sampling;
        let mc = McConfig {
            threshold: self.cfg.z_values()[k],
            ..s.mc.clone()
        };
        let key = self.derived_key(&self.instanton_key(k), &["sampling"]);
        let spec = self.spec.as_ref();
        let mut summary = McSummary {
            eps: mc.eps,
            direct: None,
            importance: None,
            conditioned_attempted: None,
            conditioned_accepted: None,
            conditioned_overflowed: None,
            conditioned_ess: None,
        };
        if s.direct {
            summary.direct = Some(direct_tail_mc(spec, &mc).map_err(CliError::stage("sample"))?);
        }
        let mut blob = self.blob("sample", k, &key);
        if let Some(inst) = inst {
            if s.importance {
                summary.importance = Some(importance_sampled_tail(spec, inst, &mc).map_err(CliError::stage("sample"))?);
            }
            if s.conditioned {
                let cs = importance_sampled_paths(spec, inst, &s.record_times, &mc).map_err(CliError::stage("sample"))?;
                let n = spec.state_dim();
                let (mut mean, mut cov, mut se) = (Vec::new(), Vec::new(), Vec::new());
                let mut ess = f64::NAN;
                for j in 0..cs.nodes.len() {
                    let mo = cs.moments(j).map_err(CliError::stage("sample"))?;
                    mean.extend(mo.mean.iter());
                    se.extend(mo.mean_std_error.iter());
                    cov.extend(row_major(&mo.covariance));
                    ess = mo.effective_sample_size;
                }
                let j = cs.nodes.len();
                let times: Vec<f64> = cs.nodes.iter().map(|&i| inst.grid().nodes()[i]).collect();
                blob.push("sample_times", &[j], &times)?;
                blob.push("sample_mean", &[j, n], &mean)?;
                blob.push("sample_mean_std_error", &[j, n], &se)?;
                blob.push("sample_covariance", &[j, n, n], &cov)?;
                summary.conditioned_attempted = Some(cs.attempted);
                summary.conditioned_accepted = Some(cs.accepted);
                summary.conditioned_overflowed = Some(cs.overflowed);
                summary.conditioned_ess = Some(ess);
            }
        }
        let file = self.store("sample", k, &key, &summary, blob)?;
        self.record("sample", k, &key, "computed", &file.arrays);
        Ok(summary)
    }

    fn point(&mut self, target: Target, k: usize, warm: Option<&InstantonResult>) -> CliResult<InstantonResult> {
        let cfg = self.cfg;
        let z = cfg.z_values()[k];
        self.points.push(PointResult {
            z,
            ..Default::default()
        });
        let inst = self.instanton(k, warm)?;
        {
            let p = self.points.last_mut().expect("point");
            p.rate = Some(inst.rate);
            p.lambda = Some(inst.lambda);
            p.obs_residual = Some(inst.obs_residual);
            p.stationarity = Some(inst.stationarity);
            p.iterations = Some(inst.iterations);
        }
        let sr = if target.wants("spectrum", cfg) {
            let sr = self.spectrum(k, &inst)?;
            let p = self.points.last_mut().expect("point");
            p.matvec_count = Some(sr.matvec_count);
            if target.wants("estimate", cfg) {
                let (cf, det) = prefactor_fredholm(&inst, &sr, cfg.spectrum.truncation_tol).map_err(CliError::stage("estimate"))?;
                p.prefactor_fredholm = Some(cf);
                p.determinant = Some(det);
            }
            Some(sr)
        } else {
            None
        };
        if target.wants("riccati", cfg) {
            let rs = self.riccati(k, &inst)?;
            let p = self.points.last_mut().expect("point");
            p.prefactor_riccati = Some(rs.prefactor);
            p.riccati_trace_integral = Some(rs.trace_integral);
        }
        if target.wants("estimate", cfg) {
            let p = self.points.last_mut().expect("point");
            if let Some(cf) = p.prefactor_fredholm.or(p.prefactor_riccati) {
                for &eps in &cfg.eps {
                    let tail = sharpldt::tail_probability(inst.rate, cf, eps).map_err(CliError::stage("estimate"))?;
                    let pdf = sharpldt::pdf_estimate(inst.rate, inst.lambda, cf, eps).map_err(CliError::stage("estimate"))?;
                    p.estimates.push(eps_estimate(eps, tail, pdf));
                }
            }
        }
        if target.wants("tube", cfg) {
            let sr = sr.as_ref().expect("tube requires the spectrum");
            self.tube(k, &inst, sr)?;
        }
        if target.wants("sample", cfg) {
            let s = &cfg.sampling;
            let needs_inst = s.importance || s.conditioned;
            let summary = self.sample(k, needs_inst.then_some(&inst))?;
            self.points.last_mut().expect("point").sampling = Some(summary);
        }
        Ok(inst)
    }
}

fn eps_estimate(eps: f64, tail: LogValue, pdf: LogValue) -> EpsEstimate {
    EpsEstimate {
        eps,
        tail: tail.value(),
        log10_tail: tail.log10(),
        pdf: pdf.value(),
        log10_pdf: pdf.log10(),
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub(crate) fn row_major(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Runs the stages needed for `target` and writes `manifest.json` into
/// `out`. On a stage failure the manifest records it and the error is
/// returned.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, target: Target) -> CliResult<ArtifactManifest> {
    let spec = cfg.problem.build()?;
    let grid = Arc::new(cfg.instanton.grid().map_err(|e| CliError::Config(e.to_string()))?);
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut run = Run {
        cfg,
        dir: out.to_path_buf(),
        spec,
        grid,
        stages: Vec::new(),
        arrays: Vec::new(),
        points: Vec::new(),
    };
    let mut failure = None;
    let mut warm: Option<InstantonResult> = None;
    let mut err = None;
    for k in 0..cfg.z_values().len() {
        match run.point(target, k, warm.as_ref()) {
            Ok(inst) => warm = Some(inst),
            Err(e) => {
                let stage = match &e {
                    CliError::Stage { stage, .. } => stage.clone(),
                    _ => "io".to_string(),
                };
                run.stages.push(StageRecord {
                    name: stage.clone(),
                    z_index: k,
                    key: String::new(),
                    status: "failed".into(),
                    diagnostics: Some(e.to_string()),
                });
                failure = Some(Failure {
                    stage,
                    z_index: k,
                    message: e.to_string(),
                    exit_code: e.exit_code(),
                });
                err = Some(e);
                break;
            }
        }
    }
    let hash = cfg.hash();
    let mut config = serde_json::to_value(cfg).expect("config serializes");
    if let Some(o) = config.as_object_mut() {
        o.remove("output_dir");
    }
    let manifest = ArtifactManifest {
        run_id: hash[..12].to_string(),
        config_hash: hash,
        config,
        format_version: FORMAT_VERSION,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        points: run.points,
        stages: run.stages,
        arrays: run.arrays,
        failure,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    match err {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}
