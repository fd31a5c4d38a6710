//! Command-line pipeline: simulate, select features, train, evaluate, run
//! CPA and tabulate results, each stage reading the previous one's output.

pub mod commands;
pub mod config;
pub mod report;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("evaluation N/A on every byte: {0}")]
    AllNa(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::AllNa(_) => 5,
        }
    }
}

impl From<itlsca::Error> for CliError {
    fn from(e: itlsca::Error) -> Self {
        match e {
            itlsca::Error::Config(m) => CliError::Config(m),
            e @ itlsca::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}
