use thiserror::Error;

/// Failure of a command, classified by its exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches an exit-code class to library errors. Divergence always maps to
/// its own class regardless of where it surfaced.
pub trait Classify<T> {
    fn config(self) -> CliResult<T>;
    fn data(self) -> CliResult<T>;
    fn other(self) -> CliResult<T>;
}

fn classify(e: hcl_core::Error, fallback: fn(String) -> CliError) -> CliError {
    match e {
        hcl_core::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
        e => fallback(e.to_string()),
    }
}

impl<T> Classify<T> for hcl_core::Result<T> {
    fn config(self) -> CliResult<T> {
        self.map_err(|e| classify(e, CliError::Config))
    }

    fn data(self) -> CliResult<T> {
        self.map_err(|e| classify(e, CliError::Data))
    }

    fn other(self) -> CliResult<T> {
        self.map_err(|e| classify(e, CliError::Other))
    }
}

/// Output file failures.
pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}
