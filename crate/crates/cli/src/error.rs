use std::path::Path;

use syntaxgen::config::ConfigError;
use syntaxgen::corpus::CorpusError;
use syntaxgen::grammar::GrammarError;
use syntaxgen::metrics::MetricsError;
use syntaxgen::model::ModelError;
use syntaxgen::nl_reader::NlError;
use syntaxgen::synth::SynthError;
use syntaxgen::training::{CheckpointError, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::GradCheck(_) => 5,
        }
    }

    pub fn read(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("cannot read {}: {e}", path.display()))
    }

    pub fn write(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("cannot write {}: {e}", path.display()))
    }

    pub fn grammar(path: &Path, e: GrammarError) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(format!("configuration: {e}"))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NlError> for CliError {
    fn from(e: NlError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Infeasible(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Checkpoint(_) | TrainError::Config(_) | TrainError::Dims(_) => {
                CliError::Checkpoint(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}
