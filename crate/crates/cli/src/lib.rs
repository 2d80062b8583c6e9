//! Batch front-end for `sharpldt`: JSON run configurations, staged runs
//! with on-disk caching, and CSV exports for plotting.

pub mod artifact;
pub mod config;
mod error;
pub mod export;
pub mod pipeline;

pub use artifact::ArrayEntry;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use export::{export_plot_data, Plot};
pub use pipeline::{run_pipeline, ArtifactManifest, Target};
