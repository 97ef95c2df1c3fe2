use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error{}{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default(), column.as_ref().map(|c| format!(", column '{c}'")).unwrap_or_default())]
    Parse {
        row: Option<usize>,
        column: Option<String>,
        message: String,
    },

    /// IRLS did not reach the gradient tolerance.
    #[error("solver did not converge after {iterations} iterations (gradient max-norm {gradient_norm:e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("non-finite value in influence-function term '{term}'")]
    Evaluation { term: &'static str },

    #[error("arm {arm} not present in training folds")]
    ArmAbsent { arm: u8 },

    #[error("denominator nonpositive: tau_num_hat = {tau_num}, tau_den_hat = {tau_den}")]
    NonpositiveDenominator { tau_num: f64, tau_den: f64 },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("simulation harness: {0}")]
    Harness(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error reports and FFI status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Parse { .. } => "parse",
            Error::NonConvergence { .. } | Error::Singular(_) => "solver",
            Error::Evaluation { .. } => "evaluation",
            Error::ArmAbsent { .. } | Error::NonpositiveDenominator { .. } => "estimation",
            Error::Fold { source, .. } => source.kind(),
            Error::Harness(_) => "harness",
            Error::Io(_) => "io",
            Error::Json(_) | Error::Csv(_) => "parse",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
