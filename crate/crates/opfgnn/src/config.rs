//! Run configuration: one TOML file covering graph construction, model
//! shape, penalty weights, training, and the per-instance solver.
//!
//! Every field has a default, so an empty file (or a file with only the
//! sections being overridden) is valid. The `[train]` and `[solve]`
//! sections hold only their own knobs; the shared `[gnn]` and `[penalty]`
//! sections are folded in by [`RunConfig::train_config`] and
//! [`RunConfig::solve_config`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::NetworkCase;
use crate::gnn::GnnConfig;
use crate::grid::{default_alpha, DEFAULT_BETA, DEFAULT_GSO_NORMALIZE};
use crate::loss::PenaltyConfig;
use crate::solve::SolveConfig;
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GsoConfig {
    /// Edge-weight decay; omitted means the scale-free per-case default.
    pub alpha: Option<f64>,
    /// Weights at or below this are pruned to zero.
    pub beta: f64,
    /// Rescale by the spectral radius after pruning.
    pub normalize: bool,
}

impl Default for GsoConfig {
    fn default() -> Self {
        Self { alpha: None, beta: DEFAULT_BETA, normalize: DEFAULT_GSO_NORMALIZE }
    }
}

impl GsoConfig {
    pub fn resolve_alpha(&self, case: &NetworkCase) -> f64 {
        self.alpha.unwrap_or_else(|| default_alpha(case))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            seed: t.seed,
            validation_fraction: t.validation_fraction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveSection {
    pub max_iters: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub residual_tolerance: f64,
    pub restarts: usize,
}

impl Default for SolveSection {
    fn default() -> Self {
        let s = SolveConfig::default();
        Self {
            max_iters: s.max_iters,
            learning_rate: s.learning_rate,
            optimizer: s.optimizer,
            residual_tolerance: s.residual_tolerance,
            restarts: s.restarts,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub gso: GsoConfig,
    pub gnn: GnnConfig,
    pub penalty: PenaltyConfig,
    pub train: TrainSection,
    pub solve: SolveSection,
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            optimizer: self.train.optimizer,
            penalty: self.penalty,
            gnn: self.gnn,
            seed: self.train.seed,
            validation_fraction: self.train.validation_fraction,
        }
    }

    pub fn solve_config(&self) -> SolveConfig {
        SolveConfig {
            max_iters: self.solve.max_iters,
            learning_rate: self.solve.learning_rate,
            optimizer: self.solve.optimizer,
            penalty: self.penalty,
            residual_tolerance: self.solve.residual_tolerance,
            restarts: self.solve.restarts,
        }
    }

    /// Serialized snapshot for run manifests.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &str, why: String| {
            Err(ConfigError::Invalid { field: field.to_string(), why })
        };
        if let Some(alpha) = self.gso.alpha {
            if !(alpha >= 0.0) {
                return bad("gso.alpha", format!("must be nonnegative, got {alpha}"));
            }
        }
        if !(0.0..1.0).contains(&self.gso.beta) {
            return bad("gso.beta", format!("must lie in [0, 1), got {}", self.gso.beta));
        }
        if self.gnn.layers == 0 {
            return bad("gnn.layers", "must be at least 1".to_string());
        }
        if self.gnn.width == 0 {
            return bad("gnn.width", "must be at least 1".to_string());
        }
        if !(self.loss_weights_finite()) {
            return bad("penalty", "weights must be finite".to_string());
        }
        if !(self.penalty.s > 0.0) {
            return bad("penalty.s", format!("must be positive, got {}", self.penalty.s));
        }
        if !(self.penalty.t > 0.0) {
            return bad("penalty.t", format!("must be positive, got {}", self.penalty.t));
        }
        if self.penalty.lambda < 0.0 || self.penalty.mu < 0.0 {
            return bad("penalty", "lambda and mu must be nonnegative".to_string());
        }
        if !(self.train.learning_rate > 0.0) {
            return bad(
                "train.learning_rate",
                format!("must be positive, got {}", self.train.learning_rate),
            );
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size", "must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.train.validation_fraction) {
            return bad(
                "train.validation_fraction",
                format!("must lie in [0, 1), got {}", self.train.validation_fraction),
            );
        }
        if !(self.solve.learning_rate > 0.0) {
            return bad(
                "solve.learning_rate",
                format!("must be positive, got {}", self.solve.learning_rate),
            );
        }
        if !(self.solve.residual_tolerance > 0.0) {
            return bad(
                "solve.residual_tolerance",
                format!("must be positive, got {}", self.solve.residual_tolerance),
            );
        }
        if self.solve.restarts == 0 {
            return bad("solve.restarts", "must be at least 1".to_string());
        }
        Ok(())
    }

    fn loss_weights_finite(&self) -> bool {
        [self.penalty.s, self.penalty.t, self.penalty.lambda, self.penalty.mu]
            .iter()
            .all(|w| w.is_finite())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid TOML in {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid run configuration: {field} {why}")]
    Invalid { field: String, why: String },
}

/// Reads, parses, and validates a run configuration file.
pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let config: RunConfig = toml::from_str(&text)
        .map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
    config.validate()?;
    Ok(config)
}
