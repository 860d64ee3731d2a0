use std::fmt;

use ctxlens::boosting::BoostError;
use ctxlens::corpus::CorpusError;
use ctxlens::detection::DetectionError;
use ctxlens::oracle::OracleError;
use ctxlens::probe::ProbeError;
use ctxlens::reporting::ReportError;

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// The model backend failed (exit 2).
    Backend(String),
    /// Input or output data problems (exit 3).
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Backend(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Backend(m) => write!(f, "backend error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Backend { .. } => CliError::Backend(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DetectionError> for CliError {
    fn from(e: DetectionError) -> Self {
        match e {
            DetectionError::Oracle(o) => o.into(),
            DetectionError::Probe(p) => p.into(),
            DetectionError::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<BoostError> for CliError {
    fn from(e: BoostError) -> Self {
        match e {
            BoostError::Oracle(o) => o.into(),
            BoostError::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Oracle(o) => o.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
