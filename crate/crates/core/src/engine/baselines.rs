//! Full-space Adam and GaLore (Adam on gradients projected onto a periodically
//! refreshed low-rank basis), driven by the same batch stream as RSO.

use serde::{Deserialize, Serialize};

use super::{probe, RunTrace, TraceRow, TrainOutcome};
use crate::cost::encode_gradients;
use crate::error::{Error, Result};
use crate::objectives::{Objective, ParamSet};
use crate::projection::{sample_projection, streams, ProjectionKind};
use crate::scalar::Scalar;
use crate::solvers::{AdamConfig, AdamState};
use crate::tensor::{left_singular_vectors, Matrix, RngStream};

const JACOBI_SWEEPS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamTrainConfig {
    pub adam: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    /// Trace row every this many steps (and at the last step).
    pub log_every: usize,
    pub comm_element_bytes: usize,
}

impl Default for AdamTrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            steps: 1000,
            seed: 0,
            log_every: 20,
            comm_element_bytes: 4,
        }
    }
}

/// Where GaLore's basis comes from at each refresh.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaloreBasis {
    /// Top left singular vectors of the current gradient.
    Svd,
    /// A fresh Haar-distributed orthonormal basis.
    Random,
    /// `P = I`; requires rank equal to the row count. Reduces to Adam.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaloreConfig {
    pub rank: usize,
    pub refresh_interval: usize,
    pub basis: GaloreBasis,
    /// Multiplies the lifted update `P N`.
    pub scale: f64,
    pub adam: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    pub log_every: usize,
    pub comm_element_bytes: usize,
}

impl Default for GaloreConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            refresh_interval: 200,
            basis: GaloreBasis::Svd,
            scale: 1.0,
            adam: AdamConfig::default(),
            steps: 1000,
            seed: 0,
            log_every: 20,
            comm_element_bytes: 4,
        }
    }
}

fn check_common(steps_log_every: usize, comm_element_bytes: usize) -> Result<()> {
    if steps_log_every == 0 {
        return Err(Error::Config("log_every must be at least 1".into()));
    }
    if comm_element_bytes != 2 && comm_element_bytes != 4 {
        return Err(Error::Config("comm_element_bytes must be 2 or 4".into()));
    }
    Ok(())
}

/// Accumulates step and byte counts into the most recent row.
struct Logger {
    trace: RunTrace,
    log_every: usize,
    state_entries: u64,
}

impl Logger {
    fn log<T: Scalar, O: Objective<T>>(&mut self, objective: &O, w: &ParamSet<T>, full: &O::Batch, k: usize) -> Result<()> {
        let (f, grad_sq) = probe(objective, w, full)?;
        self.trace.rows.push(TraceRow {
            k,
            f,
            grad_sq_norm: grad_sq,
            eps_cert: None,
            inner_steps: 0,
            comm_bytes: 0,
            opt_state_entries: self.state_entries,
        });
        Ok(())
    }

    fn count(&mut self, bytes: u64) {
        if let Some(row) = self.trace.rows.last_mut() {
            row.inner_steps += 1;
            row.comm_bytes += bytes;
        }
    }

    fn due(&self, step: usize, last: usize) -> bool {
        step % self.log_every == 0 || step == last
    }
}

fn finish<T>(w: ParamSet<T>, logger: Logger, result: Result<()>) -> Result<TrainOutcome<T>> {
    let aborted = match result {
        Ok(()) => None,
        Err(Error::NonFinite(what)) => Some(format!("non-finite {what}")),
        Err(e) => return Err(e),
    };
    Ok(TrainOutcome {
        params: w,
        trace: logger.trace,
        aborted,
    })
}

/// Adam over every parameter, one minibatch per step.
pub fn adam_train<T: Scalar, O: Objective<T>>(objective: &O, cfg: &AdamTrainConfig) -> Result<TrainOutcome<T>> {
    check_common(cfg.log_every, cfg.comm_element_bytes)?;
    let mut w = objective.initial_params();
    let n_layers = w.layers.len();
    let shapes: Vec<(usize, usize)> = w.layers.iter().chain(&w.dense).map(Matrix::shape).collect();
    let mut state = AdamState::new(&shapes, cfg.adam)?;
    let full = objective.full_batch();
    let mut batch_rng = RngStream::derived(cfg.seed, &[streams::BATCH]);
    let mut logger = Logger {
        trace: RunTrace::new("adam"),
        log_every: cfg.log_every,
        state_entries: state.entries() as u64,
    };
    let result = (|| {
        logger.log(objective, &w, &full, 0)?;
        for step in 1..=cfg.steps {
            let batch = objective.sample_batch(&mut batch_rng);
            let eval = objective.evaluate(&w, &batch)?;
            let bytes = encode_gradients(&eval.layer_grads, cfg.comm_element_bytes)?.len() as u64;
            let grads: Vec<Matrix<T>> = eval.layer_grads.into_iter().chain(eval.dense_grads).collect();
            let mut params: Vec<Matrix<T>> = std::mem::take(&mut w.layers).into_iter().chain(std::mem::take(&mut w.dense)).collect();
            let stepped = state.step(&mut params, &grads, 1.0);
            w.dense = params.split_off(n_layers);
            w.layers = params;
            stepped?;
            logger.count(bytes);
            if logger.due(step, cfg.steps) {
                logger.log(objective, &w, &full, step)?;
            }
        }
        Ok(())
    })();
    finish(w, logger, result)
}

fn refresh_basis<T: Scalar>(
    cfg: &GaloreConfig,
    grad: &Matrix<T>,
    layer: usize,
    step: usize,
) -> Result<Matrix<T>> {
    let m = grad.rows();
    match cfg.basis {
        GaloreBasis::Svd => left_singular_vectors(grad, cfg.rank, JACOBI_SWEEPS).map(|(u, _)| u),
        GaloreBasis::Random => {
            let mut rng = RngStream::derived(cfg.seed, &[streams::PROJECTION, layer as u64, step as u64]);
            // Haar matrices carry a √(m/r) scale; GaLore wants orthonormal columns.
            let p: Matrix<T> = sample_projection(&mut rng, m, cfg.rank, ProjectionKind::Haar)?;
            Ok(p.scale(T::of((cfg.rank as f64 / m as f64).sqrt())))
        }
        GaloreBasis::Identity => Ok(Matrix::identity(m)),
    }
}

/// GaLore: per layer, `R = Pᵀ G`, Adam moments on `R`, `W ← W − α s P N`.
/// The basis is refreshed every `refresh_interval` steps; moments are carried
/// across refreshes. Dense parameters use ordinary Adam.
pub fn galore_train<T: Scalar, O: Objective<T>>(objective: &O, cfg: &GaloreConfig) -> Result<TrainOutcome<T>> {
    check_common(cfg.log_every, cfg.comm_element_bytes)?;
    if cfg.refresh_interval == 0 {
        return Err(Error::Config("refresh_interval must be at least 1".into()));
    }
    if !(cfg.scale > 0.0) {
        return Err(Error::Config(format!("scale must be positive, got {}", cfg.scale)));
    }
    let mut w = objective.initial_params();
    let shapes = w.layer_shapes();
    for (l, &(m, _)) in shapes.iter().enumerate() {
        let ok = match cfg.basis {
            GaloreBasis::Identity => cfg.rank == m,
            _ => cfg.rank >= 1 && cfg.rank <= m,
        };
        if !ok {
            return Err(Error::Config(format!("layer {l}: rank {} invalid for {m} rows", cfg.rank)));
        }
    }
    let moment_shapes: Vec<(usize, usize)> = shapes.iter().map(|&(_, n)| (cfg.rank, n)).collect();
    let mut state = AdamState::new(&moment_shapes, cfg.adam)?;
    let dense_shapes: Vec<(usize, usize)> = w.dense.iter().map(Matrix::shape).collect();
    let mut dense_state = if dense_shapes.is_empty() {
        None
    } else {
        Some(AdamState::new(&dense_shapes, cfg.adam)?)
    };
    let full = objective.full_batch();
    let mut batch_rng = RngStream::derived(cfg.seed, &[streams::BATCH]);
    let mut logger = Logger {
        trace: RunTrace::new("galore"),
        log_every: cfg.log_every,
        state_entries: (state.entries() + dense_state.as_ref().map_or(0, AdamState::entries)) as u64,
    };
    let mut bases: Vec<Matrix<T>> = Vec::new();
    let lr = T::of(cfg.adam.lr * cfg.scale);
    let result = (|| {
        logger.log(objective, &w, &full, 0)?;
        for step in 1..=cfg.steps {
            let batch = objective.sample_batch(&mut batch_rng);
            let eval = objective.evaluate(&w, &batch)?;
            let bytes = encode_gradients(&eval.layer_grads, cfg.comm_element_bytes)?.len() as u64;
            if (step - 1) % cfg.refresh_interval == 0 {
                let mut fresh = Vec::with_capacity(shapes.len());
                for (l, g) in eval.layer_grads.iter().enumerate() {
                    g.ensure_finite(|| format!("gradient of layer {l}"))?;
                    match refresh_basis(cfg, g, l, step) {
                        Ok(p) => fresh.push(p),
                        Err(Error::NoConvergence(what)) if !bases.is_empty() => {
                            log::warn!("galore step {step} layer {l}: {what} failed, keeping previous basis");
                            logger.trace.svd_fallbacks += 1;
                            fresh.push(bases[l].clone());
                        }
                        Err(e) => return Err(e),
                    }
                }
                bases = fresh;
            }
            let projected = bases
                .iter()
                .zip(&eval.layer_grads)
                .map(|(p, g)| p.matmul_tn(g))
                .collect::<Result<Vec<_>>>()?;
            let dirs = state.directions(&projected)?;
            for ((wl, p), n) in w.layers.iter_mut().zip(&bases).zip(&dirs) {
                wl.axpy(-lr, &p.matmul(n)?)?;
            }
            if let Some(ds) = dense_state.as_mut() {
                ds.step(&mut w.dense, &eval.dense_grads, 1.0)?;
            }
            logger.count(bytes);
            if logger.due(step, cfg.steps) {
                logger.log(objective, &w, &full, step)?;
            }
        }
        Ok(())
    })();
    finish(w, logger, result)
}
