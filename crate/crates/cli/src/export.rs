//! CSV tables behind the standard plots.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::pipeline::ArtifactManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Plot {
    EigenDecay,
    DetConvergence,
    TailVsZ,
    TubeSlices,
}

impl Plot {
    pub fn name(self) -> &'static str {
        match self {
            Plot::EigenDecay => "eigen_decay",
            Plot::DetConvergence => "det_convergence",
            Plot::TailVsZ => "tail_vs_z",
            Plot::TubeSlices => "tube_slices",
        }
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Artifact(e.to_string())
}

fn writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))?;
    }
    csv::Writer::from_path(path).map_err(csv_err)
}

/// Writes the CSV files for `which` into `dir/export` and returns their paths.
pub fn export_plot_data(manifest: &ArtifactManifest, dir: &Path, which: Plot) -> CliResult<Vec<PathBuf>> {
    let out = dir.join("export");
    let mut files = Vec::new();
    match which {
        Plot::EigenDecay | Plot::DetConvergence => {
            for k in 0..manifest.points.len() {
                let name = if which == Plot::EigenDecay { "eigenvalues" } else { "partial_products" };
                let values = manifest.array(dir, &format!("z{k}/{name}"))?;
                let path = out.join(format!("{}_z{k}.csv", which.name()));
                let mut w = writer(&path)?;
                if which == Plot::EigenDecay {
                    w.write_record(["i", "abs_mu", "sign"]).map_err(csv_err)?;
                    for (i, mu) in values.iter().enumerate() {
                        w.write_record(&[(i + 1).to_string(), mu.abs().to_string(), mu.signum().to_string()])
                            .map_err(csv_err)?;
                    }
                } else {
                    w.write_record(["m", "partial_product"]).map_err(csv_err)?;
                    for (i, p) in values.iter().enumerate() {
                        w.write_record(&[(i + 1).to_string(), p.to_string()]).map_err(csv_err)?;
                    }
                }
                w.flush().map_err(|e| CliError::io(&path, e))?;
                files.push(path);
            }
        }
        Plot::TailVsZ => {
            let path = out.join("tail_vs_z.csv");
            let mut w = writer(&path)?;
            w.write_record(["z", "eps", "rate", "prefactor", "tail", "log10_tail"]).map_err(csv_err)?;
            for p in &manifest.points {
                if p.estimates.is_empty() {
                    return Err(CliError::Artifact(format!("missing estimates for z = {}", p.z)));
                }
                let rate = p.rate.ok_or_else(|| CliError::Artifact(format!("missing rate for z = {}", p.z)))?;
                let cf = p.prefactor_fredholm.or(p.prefactor_riccati).unwrap_or(f64::NAN);
                for e in &p.estimates {
                    w.write_record(&[
                        p.z.to_string(),
                        e.eps.to_string(),
                        rate.to_string(),
                        cf.to_string(),
                        e.tail.to_string(),
                        e.log10_tail.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
            w.flush().map_err(|e| CliError::io(&path, e))?;
            files.push(path);
        }
        Plot::TubeSlices => {
            for k in 0..manifest.points.len() {
                let times = manifest.array(dir, &format!("z{k}/tube_times"))?;
                let mean_entry = manifest.entry(&format!("z{k}/tube_mean"))?;
                let n = mean_entry.shape[1];
                let mean = manifest.array(dir, &mean_entry.name)?;
                let cov = manifest.array(dir, &format!("z{k}/tube_covariance"))?;
                let path = out.join(format!("tube_slices_z{k}.csv"));
                let mut w = writer(&path)?;
                w.write_record(["t", "i", "j", "mean_i", "c_ij"]).map_err(csv_err)?;
                for (s, t) in times.iter().enumerate() {
                    for i in 0..n {
                        for j in 0..n {
                            w.write_record(&[
                                t.to_string(),
                                i.to_string(),
                                j.to_string(),
                                mean[s * n + i].to_string(),
                                cov[(s * n + i) * n + j].to_string(),
                            ])
                            .map_err(csv_err)?;
                        }
                    }
                }
                w.flush().map_err(|e| CliError::io(&path, e))?;
                files.push(path);
            }
        }
    }
    Ok(files)
}
