use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sharpldt_cli::{export_plot_data, run_pipeline, ArtifactManifest, CliError, Plot, RunConfig, Target};

#[derive(Parser)]
#[command(name = "sharpldt", version, about = "Sharp extreme-event probability estimates for SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; defaults to `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Minimum-action noise path for each target value.
    Instanton(Common),
    /// Dominant eigenvalues of the projected second variation.
    Spectrum(Common),
    /// Prefactor from the matrix Riccati equation.
    Riccati(Common),
    /// Prefactors and tail/density estimates.
    Estimate(Common),
    /// Conditioned mean and covariance along the instanton.
    Tube(Common),
    /// Monte Carlo references.
    Sample(Common),
    /// Every stage enabled in the config.
    Pipeline(Common),
    /// CSV tables from a finished run directory.
    Export {
        /// Run directory containing `manifest.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        which: Vec<Plot>,
    },
}

fn prepare(c: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sharpldt-run"));
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, target) = match &cli.command {
        Command::Instanton(c) => (c, Target::Instanton),
        Command::Spectrum(c) => (c, Target::Spectrum),
        Command::Riccati(c) => (c, Target::Riccati),
        Command::Estimate(c) => (c, Target::Estimate),
        Command::Tube(c) => (c, Target::Tube),
        Command::Sample(c) => (c, Target::Sample),
        Command::Pipeline(c) => (c, Target::Pipeline),
        Command::Export { out, which } => {
            let manifest = ArtifactManifest::load(out)?;
            let which = if which.is_empty() { vec![Plot::EigenDecay, Plot::DetConvergence, Plot::TailVsZ] } else { which.clone() };
            for w in which {
                for f in export_plot_data(&manifest, out, w)? {
                    println!("{}", f.display());
                }
            }
            return Ok(());
        }
    };
    let (cfg, out) = prepare(common)?;
    let manifest = run_pipeline(&cfg, &out, target)?;
    for p in &manifest.points {
        println!("{}", serde_json::to_string(p).expect("point serializes"));
    }
    eprintln!("manifest: {}", out.join("manifest.json").display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
