use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: sharpldt::Error,
    },

    #[error("artifact error: {0}")]
    Artifact(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn stage(stage: &str) -> impl FnOnce(sharpldt::Error) -> CliError + '_ {
        move |source| CliError::Stage {
            stage: stage.to_string(),
            source,
        }
    }

    /// 2 for configuration and input problems, 3 for numerical failures,
    /// 4 when an assumption of the estimate is violated.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Artifact(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Stage { source, .. } => match source {
                sharpldt::Error::AssumptionViolation(_) | sharpldt::Error::RiccatiSingularity { .. } => 4,
                sharpldt::Error::InvalidArgument(_) => 2,
                _ => 3,
            },
        }
    }
}
