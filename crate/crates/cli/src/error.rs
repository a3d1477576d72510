use heta_core::HetaError;
use serde_json::json;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or flag combinations. Exit code 2.
    Usage(String),
    /// Anything that went wrong while running. Exit code 1.
    Core(HetaError),
    /// Theory checks ran but some bound failed. Exit code 1.
    Violations(usize),
}

impl From<HetaError> for CliError {
    fn from(e: HetaError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Violations(_) => "bound-violation",
            CliError::Core(e) => match e {
                HetaError::Shape { .. } | HetaError::NotScalar(_) => "shape",
                HetaError::NonFinite { .. } => "non-finite",
                HetaError::OutOfVocab { .. } | HetaError::VocabMismatch(_) => "vocab-mismatch",
                HetaError::SequenceTooLong { .. } => "sequence-too-long",
                HetaError::InvalidConfig(_) => "invalid-config",
                HetaError::Precondition(_) => "precondition",
                HetaError::RangeFinderBreakdown { .. } => "range-finder-breakdown",
                HetaError::PowerIteration { .. } => "power-iteration",
                HetaError::NonConvergence { .. } => "non-convergence",
                HetaError::Version { .. } => "version",
                HetaError::Malformed { .. } => "malformed",
                HetaError::Io(_) => "io",
                HetaError::Json(_) => "json",
            },
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
            CliError::Violations(n) => format!("{} bound checks violated", n),
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        json!({"error": {"kind": self.kind(), "message": self.message(), "exit_code": self.exit_code()}}).to_string()
    }
}
