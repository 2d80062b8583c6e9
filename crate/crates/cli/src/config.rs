//! Run configuration: one JSON document, unknown keys rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sharpldt::problems::{make_kdv, make_model2d, make_ou, KdvConfig};
use sharpldt::{InstantonConfig, McConfig, ProblemSpec, RiccatiConfig, SpectrumConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Model2d,
    Ou {
        #[serde(default = "one")]
        relaxation: f64,
        #[serde(default = "one")]
        horizon: f64,
    },
    Kdv(KdvConfig),
}

fn one() -> f64 {
    1.0
}

impl ProblemConfig {
    pub fn build(&self) -> CliResult<Box<dyn ProblemSpec>> {
        let spec: Box<dyn ProblemSpec> = match self {
            ProblemConfig::Model2d => Box::new(make_model2d()),
            ProblemConfig::Ou { relaxation, horizon } => {
                Box::new(make_ou(*relaxation, *horizon).map_err(|e| CliError::Config(e.to_string()))?)
            }
            ProblemConfig::Kdv(k) => Box::new(make_kdv(*k).map_err(|e| CliError::Config(e.to_string()))?),
        };
        Ok(spec)
    }

    /// Horizon and grid size fixed by the problem itself, if any.
    fn grid_override(&self) -> Option<(f64, Option<usize>)> {
        match self {
            ProblemConfig::Model2d => None,
            ProblemConfig::Ou { horizon, .. } => Some((*horizon, None)),
            ProblemConfig::Kdv(k) => Some((k.horizon, Some(k.n_t))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSection {
    pub enabled: bool,
    /// Number of dominant eigenvalues.
    pub m: usize,
    /// Eigenvalues below `truncation_tol · |μ_1|` are left out of the product.
    pub truncation_tol: f64,
    pub solver: SpectrumConfig,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self {
            enabled: true,
            m: 200,
            truncation_tol: 1e-8,
            solver: SpectrumConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiccatiSection {
    pub enabled: bool,
    pub solver: RiccatiConfig,
}

impl Default for RiccatiSection {
    fn default() -> Self {
        Self {
            enabled: true,
            solver: RiccatiConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeSection {
    pub enabled: bool,
    /// Times at which the marginal mean and covariance are reported.
    pub times: Vec<f64>,
    pub stride: Option<usize>,
}

impl Default for TubeSection {
    fn default() -> Self {
        Self {
            enabled: false,
            times: vec![0.05, 0.25, 0.5, 0.75, 0.95],
            stride: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub enabled: bool,
    /// Direct simulation of the tail frequency.
    pub direct: bool,
    /// Instanton-shifted tail estimate; needs `mc.dt` equal to the instanton step.
    pub importance: bool,
    /// Conditioned paths with the reweighting; moments at `record_times`.
    pub conditioned: bool,
    pub record_times: Vec<f64>,
    /// `threshold` is replaced by the target value `z`.
    pub mc: McConfig,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            enabled: false,
            direct: true,
            importance: false,
            conditioned: false,
            record_times: vec![0.25, 0.5, 0.75],
            mc: McConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub z: Option<f64>,
    /// Several targets, solved in order with warm starts.
    #[serde(default)]
    pub z_sweep: Vec<f64>,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub instanton: InstantonConfig,
    #[serde(default)]
    pub spectrum: SpectrumSection,
    #[serde(default)]
    pub riccati: RiccatiSection,
    #[serde(default)]
    pub tube: TubeSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Overrides the seeds of the individual sections.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_eps() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies the problem's own grid and the global seed to the sections.
    fn normalize(&mut self) {
        if let Some((horizon, n_t)) = self.problem.grid_override() {
            self.instanton.horizon = horizon;
            if let Some(n) = n_t {
                self.instanton.n_t = n;
            }
            self.sampling.mc.horizon = horizon;
        }
        if let Some(seed) = self.seed {
            self.set_seed(seed);
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.instanton.seed = seed;
        self.spectrum.solver.seed = seed;
        self.sampling.mc.seed = seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.z.is_some() == !self.z_sweep.is_empty() {
            return bad("give exactly one of `z` and `z_sweep`".into());
        }
        if self.z_sweep.windows(2).any(|w| w[1] <= w[0]) {
            return bad("`z_sweep` must be strictly increasing".into());
        }
        if self.eps.iter().any(|e| !(*e > 0.0)) {
            return bad("all `eps` values must be positive".into());
        }
        if self.spectrum.enabled && self.spectrum.m == 0 {
            return bad("`spectrum.m` must be positive".into());
        }
        if self.tube.enabled && !self.spectrum.enabled {
            return bad("the tube needs the spectrum stage".into());
        }
        if self.tube.times.iter().any(|t| !(*t >= 0.0 && *t <= self.instanton.horizon)) {
            return bad("tube times must lie in [0, horizon]".into());
        }
        self.instanton.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sampling.enabled {
            self.sampling.mc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.problem.build()?;
        Ok(())
    }

    pub fn z_values(&self) -> Vec<f64> {
        match self.z {
            Some(z) => vec![z],
            None => self.z_sweep.clone(),
        }
    }

    /// Canonical JSON: keys sorted, defaults filled in, output location dropped.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        v.to_string()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    /// Hash of selected sections, used as a stage cache key.
    pub fn section_hash(&self, parts: &[&str]) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let picked: serde_json::Map<String, serde_json::Value> = parts
            .iter()
            .filter_map(|p| v.get(*p).map(|x| (p.to_string(), x.clone())))
            .collect();
        sha256_hex(serde_json::Value::Object(picked).to_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}
