use std::path::{Path, PathBuf};

use serde::Serialize;

use rso_core::engine::{adam_train, galore_train, rso_train, RunTrace};
use rso_core::objectives::{LogisticProblem, Objective, QuadraticProblem, TinyLm};
use rso_core::Scalar;

use crate::config::{ExperimentConfig, OptimizerSpec, Precision, ProblemSpec};
use crate::outcome::CliError;
use crate::{to_json, write_file};

/// The summary JSON written next to every trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub algorithm: String,
    pub precision: Precision,
    pub seed: u64,
    pub rank: Option<usize>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub mean_grad_sq_norm: Option<f64>,
    pub total_steps: usize,
    pub total_comm_bytes: u64,
    pub opt_state_entries: u64,
    pub max_telescoping_residual: Option<f64>,
    pub uncertified_solves: usize,
    pub svd_fallbacks: usize,
    pub aborted: Option<String>,
}

pub struct RunResult {
    pub trace: RunTrace,
    pub summary: RunSummary,
}

fn dispatch<T: Scalar, O: Objective<T>>(objective: &O, opt: &OptimizerSpec) -> rso_core::Result<(RunTrace, Option<String>)> {
    let out = match opt {
        OptimizerSpec::Rso(c) => rso_train(objective, c)?,
        OptimizerSpec::Adam(c) => adam_train(objective, c)?,
        OptimizerSpec::Galore(c) => galore_train(objective, c)?,
    };
    Ok((out.trace, out.aborted))
}

fn run_typed<T: Scalar>(problem: &ProblemSpec, opt: &OptimizerSpec) -> rso_core::Result<(RunTrace, Option<String>)> {
    match problem {
        ProblemSpec::Quadratic { shapes, seed } => {
            let shapes: Vec<(usize, usize)> = shapes.iter().map(|s| (s[0], s[1])).collect();
            dispatch(&QuadraticProblem::<T>::random(&shapes, *seed)?, opt)
        }
        ProblemSpec::Logistic { samples, dim, batch_size, ridge, seed } => {
            dispatch(&LogisticProblem::<T>::synthetic(*samples, *dim, *batch_size, *ridge, *seed)?, opt)
        }
        ProblemSpec::TinyLm(c) => dispatch(&TinyLm::<T>::new(c.clone())?, opt),
    }
}

/// Runs one experiment without touching the filesystem.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult, CliError> {
    let (trace, aborted) = match cfg.precision {
        Precision::F64 => run_typed::<f64>(&cfg.problem, &cfg.optimizer)?,
        Precision::F32 => run_typed::<f32>(&cfg.problem, &cfg.optimizer)?,
    };
    let s = trace.summary();
    let summary = RunSummary {
        name: cfg.name.clone(),
        algorithm: cfg.optimizer.name().to_string(),
        precision: cfg.precision,
        seed: cfg.optimizer.seed(),
        rank: cfg.optimizer.rank(),
        initial_loss: s.as_ref().map(|s| s.initial_loss),
        final_loss: s.as_ref().map(|s| s.final_loss),
        mean_grad_sq_norm: s.as_ref().map(|s| s.mean_grad_sq_norm),
        total_steps: s.as_ref().map_or(0, |s| s.total_steps),
        total_comm_bytes: s.as_ref().map_or(0, |s| s.total_comm_bytes),
        opt_state_entries: s.as_ref().map_or(0, |s| s.opt_state_entries),
        max_telescoping_residual: (!trace.telescoping_residuals.is_empty()).then(|| trace.max_telescoping_residual()),
        uncertified_solves: trace.certified.iter().filter(|c| !**c).count(),
        svd_fallbacks: trace.svd_fallbacks,
        aborted,
    };
    Ok(RunResult { trace, summary })
}

pub fn trace_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.trace.csv"))
}

pub fn summary_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.summary.json"))
}

/// Writes the trace and summary, including a partial trace after a numeric
/// abort, which is then reported as an error.
pub fn write_result(result: &RunResult, dir: &Path) -> Result<(), CliError> {
    let name = &result.summary.name;
    write_file(&trace_path(dir, name), result.trace.to_csv().as_bytes())?;
    write_file(&summary_path(dir, name), to_json(&result.summary).as_bytes())?;
    match &result.summary.aborted {
        Some(why) => Err(CliError::numeric(format!("{name}: {why}"))),
        None => Ok(()),
    }
}

pub fn train(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary, CliError> {
    let result = run(cfg)?;
    write_result(&result, dir)?;
    Ok(result.summary)
}
