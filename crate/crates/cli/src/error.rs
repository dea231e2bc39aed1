//! Failure kinds and their exit codes.

use std::fmt;
use std::path::Path;

use buildout_core::bayes::BayesError;
use buildout_core::estimation::EstimationError;
use buildout_core::forecast::ForecastError;
use buildout_core::ingestion::IngestError;
use buildout_core::regime::RegimeError;
use buildout_core::synth::SynthError;
use buildout_core::ModelError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Io,
    Input,
    Config,
    Infeasible,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Io => 3,
            Kind::Input => 4,
            Kind::Config => 4,
            Kind::Infeasible => 5,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl Failure {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into(), path: None }
    }

    pub fn at(mut self, path: &Path) -> Self {
        self.path = Some(path.display().to_string());
        self
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(Kind::Io, err.to_string()).at(path)
    }

    /// Machine-readable record written to stderr.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a Failure,
            exit_code: i32,
        }
        serde_json::to_string(&Record { error: self, exit_code: self.kind.exit_code() })
            .unwrap_or_else(|_| format!("{{\"error\":{{\"message\":{:?}}}}}", self.message))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        Failure::new(Kind::Input, e.to_string())
    }
}

impl From<EstimationError> for Failure {
    fn from(e: EstimationError) -> Self {
        let kind = match e {
            EstimationError::Infeasible { .. } => Kind::Infeasible,
            EstimationError::Scenario(_) => Kind::Config,
            _ => Kind::Input,
        };
        Failure::new(kind, e.to_string())
    }
}

impl From<ForecastError> for Failure {
    fn from(e: ForecastError) -> Self {
        let kind = match e {
            ForecastError::Io(_) | ForecastError::Csv(_) => Kind::Io,
            ForecastError::Alpha(_) | ForecastError::Settings(_) => Kind::Config,
            _ => Kind::Input,
        };
        Failure::new(kind, e.to_string())
    }
}

impl From<RegimeError> for Failure {
    fn from(e: RegimeError) -> Self {
        let kind = if matches!(e, RegimeError::Io(_)) { Kind::Io } else { Kind::Input };
        Failure::new(kind, e.to_string())
    }
}

impl From<BayesError> for Failure {
    fn from(e: BayesError) -> Self {
        let kind = if matches!(e, BayesError::Io(_)) { Kind::Io } else { Kind::Input };
        Failure::new(kind, e.to_string())
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        Failure::new(Kind::Config, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::new(Kind::Input, e.to_string())
    }
}
