//! One-line failure reporting with the exit-code split the pipeline
//! promises: 2 when the invocation or the pairing of its inputs is wrong,
//! 1 when the run itself fails on data or IO.

use std::fmt::Display;
use std::path::Path;

use opfgnn::config::ConfigError;
use opfgnn::solve::SolveError;
use opfgnn::train::TrainError;

#[derive(Debug)]
pub enum Failure {
    /// Exit 2: bad flag values, invalid config, or mismatched artifacts.
    Usage(String),
    /// Exit 1: the inputs could not be read or the run failed.
    Runtime(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn runtime(msg: impl Display) -> Self {
        Failure::Runtime(msg.to_string())
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

/// IO failure annotated with what was being touched.
pub fn io_failure(action: &str, path: &Path, err: std::io::Error) -> Failure {
    Failure::Runtime(format!("{action} {}: {err}", path.display()))
}

pub fn from_config(err: ConfigError) -> Failure {
    match err {
        // An unreadable file is an environment problem; unparseable or
        // out-of-range contents mean the caller handed over a bad config.
        ConfigError::Io { .. } => Failure::runtime(err),
        ConfigError::Parse { .. } | ConfigError::Invalid { .. } => Failure::usage(err.to_string()),
    }
}

pub fn from_train(err: TrainError) -> Failure {
    match err {
        TrainError::CaseMismatch(_)
        | TrainError::EmptyDataset
        | TrainError::MisalignedBaseline { .. } => Failure::usage(err.to_string()),
        TrainError::NonFiniteLoss { .. } | TrainError::Metrics(_) => Failure::runtime(err),
    }
}

pub fn from_solve(err: SolveError) -> Failure {
    match err {
        SolveError::CaseMismatch(_) => Failure::usage(err.to_string()),
        SolveError::Metrics(_) => Failure::runtime(err),
    }
}
