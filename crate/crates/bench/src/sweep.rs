use std::path::Path;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::outcome::CliError;
use crate::train::{run, write_result, RunSummary};
use crate::write_file;

pub const AGGREGATE_HEADER: &str =
    "cell,algorithm,seed,rank,initial_loss,final_loss,mean_grad_sq_norm,total_steps,total_comm_bytes,opt_state_entries,aborted";

/// Expands the sweep lists into one config per cell, seeds outermost.
/// Empty lists keep the optimizer's own value.
pub fn cells(cfg: &ExperimentConfig) -> Result<Vec<ExperimentConfig>, CliError> {
    let seeds = if cfg.sweep.seeds.is_empty() {
        vec![cfg.optimizer.seed()]
    } else {
        cfg.sweep.seeds.clone()
    };
    let mut out = Vec::new();
    for &seed in &seeds {
        let base = cfg.optimizer.with_seed(seed);
        let variants = if cfg.sweep.ranks.is_empty() {
            vec![(base.rank(), base)]
        } else {
            cfg.sweep
                .ranks
                .iter()
                .map(|&r| base.with_rank(r).map(|o| (Some(r), o)))
                .collect::<Result<Vec<_>, _>>()?
        };
        for (rank, optimizer) in variants {
            let name = match rank {
                Some(r) => format!("{}-s{seed}-r{r}", cfg.name),
                None => format!("{}-s{seed}", cfg.name),
            };
            out.push(ExperimentConfig { name, optimizer, sweep: Default::default(), ..cfg.clone() });
        }
    }
    Ok(out)
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn aggregate_row(s: &RunSummary) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        s.name,
        s.algorithm,
        s.seed,
        s.rank.map_or(String::new(), |r| r.to_string()),
        opt(s.initial_loss),
        opt(s.final_loss),
        opt(s.mean_grad_sq_norm),
        s.total_steps,
        s.total_comm_bytes,
        s.opt_state_entries,
        s.aborted.is_some(),
    )
}

/// Runs every cell on a pool of `jobs` threads, writes one trace and summary
/// per cell and `<name>.sweep.csv` in cell order. Any aborted cell makes the
/// whole sweep report a numeric abort after all files are written.
pub fn sweep(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<Vec<RunSummary>, CliError> {
    let cells = cells(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let results = pool.install(|| cells.par_iter().map(run).collect::<Vec<_>>());
    let mut summaries = Vec::with_capacity(results.len());
    let mut first_abort = None;
    for result in results {
        let result = result?;
        if let Err(e) = write_result(&result, dir) {
            if e.exit != crate::Exit::NumericAbort {
                return Err(e);
            }
            first_abort.get_or_insert(e);
        }
        summaries.push(result.summary);
    }
    let mut text = String::from(AGGREGATE_HEADER);
    text.push('\n');
    for s in &summaries {
        text.push_str(&aggregate_row(s));
        text.push('\n');
    }
    write_file(&dir.join(format!("{}.sweep.csv", cfg.name)), text.as_bytes())?;
    match first_abort {
        Some(e) => Err(e),
        None => Ok(summaries),
    }
}
