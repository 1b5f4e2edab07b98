use std::process::ExitCode;

use rough_filter::Error;

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("configuration error: {0}")]
    Config(String),

    /// Propagation stopped early; partial outputs were written.
    #[error("numerical failure (partial outputs in {dir}): {source}")]
    Partial { dir: String, source: Error },

    #[error("verification failed: {0} check(s) did not pass")]
    Verification(usize),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 i/o, 2 configuration, 3 numerical failure, 4 verification failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => core_code(e),
            CliError::Config(_) => 2,
            CliError::Partial { .. } => 3,
            CliError::Verification(_) => 4,
            CliError::Io(_) | CliError::Json(_) => 1,
        }
    }
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Domain(_) | Error::Unsupported(_) => 2,
        Error::Diverged { .. } | Error::StepSize { .. } | Error::Conditioning { .. } | Error::NoPlausiblePosterior => 3,
        Error::Io(_) | Error::Csv(_) => 1,
    }
}

pub fn report(result: Result<(), CliError>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
