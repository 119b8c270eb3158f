//! TOML experiment files:
//!
//! ```toml
//! name = "quad-rso"
//! precision = "f64"
//!
//! [problem]
//! kind = "quadratic"
//! shapes = [[32, 16]]
//!
//! [optimizer]
//! kind = "rso"
//! ranks = [8]
//! outer_iters = 50
//! [optimizer.solver]
//! kind = "exact"
//!
//! [sweep]
//! seeds = [0, 1, 2]
//! ranks = [4, 8]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use rso_core::engine::{AdamTrainConfig, GaloreConfig, RsoConfig};
use rso_core::objectives::TinyLmConfig;

use crate::outcome::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// `½‖W − W*‖²` with `W⁰` and `W*` drawn from `N(0, 1)`.
    Quadratic {
        shapes: Vec<[usize; 2]>,
        #[serde(default)]
        seed: u64,
    },
    /// Synthetic ridge-regularized logistic regression.
    Logistic {
        samples: usize,
        dim: usize,
        batch_size: usize,
        #[serde(default = "default_ridge")]
        ridge: f64,
        #[serde(default)]
        seed: u64,
    },
    TinyLm(TinyLmConfig),
}

fn default_ridge() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Rso(RsoConfig),
    Adam(AdamTrainConfig),
    Galore(GaloreConfig),
}

impl OptimizerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerSpec::Rso(_) => "rso",
            OptimizerSpec::Adam(_) => "adam",
            OptimizerSpec::Galore(_) => "galore",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            OptimizerSpec::Rso(c) => c.seed,
            OptimizerSpec::Adam(c) => c.seed,
            OptimizerSpec::Galore(c) => c.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            OptimizerSpec::Rso(c) => c.seed = seed,
            OptimizerSpec::Adam(c) => c.seed = seed,
            OptimizerSpec::Galore(c) => c.seed = seed,
        }
        out
    }

    /// The uniform rank, if the optimizer has one.
    pub fn rank(&self) -> Option<usize> {
        match self {
            OptimizerSpec::Rso(c) if c.ranks.len() == 1 => Some(c.ranks[0]),
            OptimizerSpec::Rso(_) => None,
            OptimizerSpec::Adam(_) => None,
            OptimizerSpec::Galore(c) => Some(c.rank),
        }
    }

    pub fn with_rank(&self, rank: usize) -> Result<Self, CliError> {
        let mut out = self.clone();
        match &mut out {
            OptimizerSpec::Rso(c) => c.ranks = vec![rank],
            OptimizerSpec::Galore(c) => c.rank = rank,
            OptimizerSpec::Adam(_) => return Err(CliError::usage("adam has no rank to sweep")),
        }
        Ok(out)
    }
}

/// Value lists expanded into a grid of runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    pub ranks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub precision: Precision,
    pub problem: ProblemSpec,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks everything that can be checked without building the problem.
    pub fn validate(&self) -> Result<(), CliError> {
        let name_ok = !self.name.is_empty()
            && self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !name_ok {
            return Err(CliError::usage(format!("name `{}` must be non-empty [A-Za-z0-9._-]", self.name)));
        }
        match &self.problem {
            ProblemSpec::Quadratic { shapes, .. } => {
                if shapes.is_empty() || shapes.iter().any(|s| s[0] == 0 || s[1] == 0) {
                    return Err(CliError::usage("quadratic shapes must be non-empty and positive"));
                }
            }
            ProblemSpec::Logistic { samples, dim, batch_size, ridge, .. } => {
                if *samples == 0 || *dim == 0 || *batch_size == 0 || !(*ridge >= 0.0) {
                    return Err(CliError::usage("logistic sizes must be positive and ridge non-negative"));
                }
            }
            ProblemSpec::TinyLm(c) => c.validate()?,
        }
        match &self.optimizer {
            OptimizerSpec::Rso(c) => c.validate()?,
            OptimizerSpec::Adam(c) => c.adam.validate()?,
            OptimizerSpec::Galore(c) => c.adam.validate()?,
        }
        if !self.sweep.ranks.is_empty() {
            if let OptimizerSpec::Adam(_) = self.optimizer {
                return Err(CliError::usage("adam has no rank to sweep"));
            }
        }
        Ok(())
    }
}
