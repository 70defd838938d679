use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error(
        "covariance is not positive definite even after adding {jitter:e} to the diagonal; \
         increase the jitter or check the correlation model"
    )]
    DegenerateCovariance { jitter: f64 },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    SolverDivergence { iterations: usize, residual: f64 },

    #[error("forward model failed at step {step}{}: {source}", member_suffix(*.member))]
    Forward {
        step: usize,
        member: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("innovation covariance is singular")]
    SingularInnovation,

    #[error("unknown scenario `{0}` (expected `tracer` or `well`)")]
    UnknownScenario(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error{}: {message}", line_suffix(*.line))]
    Config { message: String, line: Option<usize> },

    #[error("missing paired records: {}", format_missing(.0))]
    MissingPairs(Vec<(String, usize, usize)>),

    #[error("tables come from different plans ({0} vs {1}); pass --force to mix them")]
    MixedPlans(String, String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }

    /// Whether the error came from the configuration layer (exit code 2).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::UnknownScenario(_))
    }
}

fn member_suffix(member: Option<usize>) -> String {
    member.map(|m| format!(" (member {m})")).unwrap_or_default()
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

fn format_missing(missing: &[(String, usize, usize)]) -> String {
    const SHOWN: usize = 20;
    let mut s = missing
        .iter()
        .take(SHOWN)
        .map(|(v, ne, e)| format!("({v}, n_e={ne}, experiment={e})"))
        .collect::<Vec<_>>()
        .join(", ");
    if missing.len() > SHOWN {
        s.push_str(&format!(" and {} more", missing.len() - SHOWN));
    }
    s
}
