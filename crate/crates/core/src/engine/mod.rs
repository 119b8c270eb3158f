//! The outer loop: sample `P^k`, solve the proximal subproblem from `B = 0`,
//! commit `W^{k+1} = W^k + P^k B̃^k`. Also the full-space baselines and the
//! verification harness.

mod baselines;
mod trace;
mod verify;

pub use baselines::{adam_train, galore_train, AdamTrainConfig, GaloreBasis, GaloreConfig};
pub use trace::{RunTrace, TraceRow, TraceSummary, CSV_HEADER};
pub use verify::{
    verify_gk_sandwich, verify_gradient_expectation, verify_theorem_bound, BoundReport, BoundRow,
    ExpectationReport, SandwichReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Objective, ParamSet};
use crate::projection::{streams, ProjectionKind, ProjectionSet};
use crate::scalar::Scalar;
use crate::solvers::{
    solve_subproblem, AdamConfig, AdamState, InexactnessTarget, InnerSolver, SolveContext, Subproblem,
};
use crate::tensor::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsoConfig {
    /// One rank for every layer, or one per layer.
    pub ranks: Vec<usize>,
    pub projection: ProjectionKind,
    /// Proximal coefficient; `None` means `1/(2L̂)`, which needs a known `L`.
    pub eta: Option<f64>,
    pub solver: InnerSolver,
    /// Inner steps `T` per outer iteration.
    pub inner_steps: usize,
    /// Certified inner solves to this `ε` (cap `10 T`) instead of fixed steps.
    pub eps: Option<f64>,
    pub outer_iters: usize,
    /// Multiplies every inner step size.
    pub lr_scale: f64,
    /// Adam for the dense (never projected) parameters.
    pub dense: AdamConfig,
    pub seed: u64,
    pub comm_element_bytes: usize,
}

impl Default for RsoConfig {
    fn default() -> Self {
        Self {
            ranks: vec![8],
            projection: ProjectionKind::Haar,
            eta: None,
            solver: InnerSolver::Gd { lr: None },
            inner_steps: 20,
            eps: None,
            outer_iters: 50,
            lr_scale: 1.0,
            dense: AdamConfig::default(),
            seed: 0,
            comm_element_bytes: 4,
        }
    }
}

impl RsoConfig {
    /// Preset for language-model training: Adam inner solver with the
    /// RSO learning-rate scale 0.35.
    pub fn language_model() -> Self {
        Self {
            ranks: vec![16],
            solver: InnerSolver::Adam(AdamConfig::default()),
            lr_scale: 0.35,
            ..Self::default()
        }
    }

    pub fn target(&self) -> InexactnessTarget {
        match self.eps {
            Some(eps) => InexactnessTarget::certified(eps, self.inner_steps),
            None => InexactnessTarget::FixedSteps { steps: self.inner_steps },
        }
    }

    /// Ranks broadcast to every layer and checked against `r ≤ m`.
    pub fn layer_ranks(&self, shapes: &[(usize, usize)]) -> Result<Vec<usize>> {
        let ranks = match self.ranks.len() {
            1 => vec![self.ranks[0]; shapes.len()],
            n if n == shapes.len() => self.ranks.clone(),
            n => {
                return Err(Error::Config(format!(
                    "{n} ranks given for {} layers",
                    shapes.len()
                )))
            }
        };
        for (l, (&r, &(m, _))) in ranks.iter().zip(shapes).enumerate() {
            if r == 0 || r > m {
                return Err(Error::Config(format!("layer {l}: rank {r} outside 1..={m}")));
            }
        }
        Ok(ranks)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(eta) = self.eta {
            if !(eta > 0.0) {
                return Err(Error::Config(format!("eta must be positive, got {eta}")));
            }
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Config(format!("lr_scale must be positive, got {}", self.lr_scale)));
        }
        if let Some(eps) = self.eps {
            if !(eps >= 0.0) {
                return Err(Error::Config(format!("eps must be non-negative, got {eps}")));
            }
        }
        if self.comm_element_bytes != 2 && self.comm_element_bytes != 4 {
            return Err(Error::Config("comm_element_bytes must be 2 or 4".into()));
        }
        self.dense.validate()
    }
}

/// Final parameters and trace. A non-finite loss stops the run early; the
/// trace then covers the iterations completed before the failure.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamSet<T>,
    pub trace: RunTrace,
    pub aborted: Option<String>,
}

/// `L̂ = max_ℓ(m_ℓ/r_ℓ) · L`.
pub fn inflated_smoothness(l: f64, shapes: &[(usize, usize)], ranks: &[usize]) -> f64 {
    let ratio = shapes
        .iter()
        .zip(ranks)
        .map(|(&(m, _), &r)| m as f64 / r as f64)
        .fold(0.0, f64::max);
    ratio * l
}

/// Full-batch loss and squared gradient norm.
fn probe<T: Scalar, O: Objective<T>>(objective: &O, w: &ParamSet<T>, full: &O::Batch) -> Result<(f64, f64)> {
    let eval = objective.evaluate(w, full)?;
    let f = eval.loss.to_f64_lossy();
    if !f.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    Ok((f, eval.grad_norm_sq().to_f64_lossy()))
}

fn inner_state_entries(solver: &InnerSolver, subspace_dim: usize) -> u64 {
    let d = subspace_dim as u64;
    match solver {
        InnerSolver::Adam(_) => 2 * d,
        InnerSolver::Momentum { .. } => d,
        _ => 0,
    }
}

/// Runs `cfg.outer_iters` outer iterations of randomized subspace
/// optimization on `objective`.
pub fn rso_train<T: Scalar, O: Objective<T>>(objective: &O, cfg: &RsoConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let shapes = objective.layer_shapes();
    let groups = objective.projection_groups();
    let ranks = cfg.layer_ranks(&shapes)?;
    let l_hat = objective
        .smoothness()
        .map(|l| inflated_smoothness(l, &shapes, &ranks));
    let eta = match (cfg.eta, l_hat) {
        (Some(eta), _) => eta,
        (None, Some(l_hat)) => 1.0 / (2.0 * l_hat),
        (None, None) => {
            return Err(Error::Config(format!(
                "eta must be given: {} has no known smoothness constant",
                objective.name()
            )))
        }
    };

    let mut w = objective.initial_params();
    let full = objective.full_batch();
    let mut batch_rng = RngStream::derived(cfg.seed, &[streams::BATCH]);
    let dense_shapes: Vec<(usize, usize)> = w.dense.iter().map(|m| m.shape()).collect();
    let mut dense_state = if dense_shapes.is_empty() {
        None
    } else {
        Some(AdamState::new(&dense_shapes, cfg.dense)?)
    };
    let subspace_dim: usize = ranks.iter().zip(&shapes).map(|(r, &(_, n))| r * n).sum();
    let state_entries = inner_state_entries(&cfg.solver, subspace_dim)
        + dense_state.as_ref().map_or(0, |s| s.entries() as u64);

    let mut trace = RunTrace::new("rso");
    trace.l_hat = l_hat;
    trace.f_star = objective.optimal_value();
    trace.eta = Some(eta);
    let target = cfg.target();
    // g^{k-1}(B̃) − ‖B̃‖²/(2η), compared with f(W^k) on arrival.
    let mut pending: Option<f64> = None;

    let mut run = |w: &mut ParamSet<T>, trace: &mut RunTrace| -> Result<()> {
        for k in 0..cfg.outer_iters {
            let (f, grad_sq) = probe(objective, w, &full)?;
            if let Some(expected) = pending.take() {
                trace.telescoping_residuals.push(relative_gap(f, expected));
            }
            let proj = ProjectionSet::sample(cfg.seed, k as u64, &shapes, &ranks, &groups, cfg.projection)?;
            let mut sub = Subproblem::new(objective, w.clone(), &proj, T::of(eta))?;
            let mut ctx = SolveContext {
                rng: &mut batch_rng,
                dense: dense_state.as_mut(),
                l_hat,
                lr_scale: cfg.lr_scale,
                comm_element_bytes: cfg.comm_element_bytes,
            };
            let outcome = solve_subproblem(&mut sub, &cfg.solver, target, &mut ctx)?;
            let g_tilde = sub.value(&outcome.b, &full)?.to_f64_lossy();
            let penalty = outcome.b.norm_sq().to_f64_lossy() / (2.0 * eta);
            pending = Some(g_tilde - penalty);
            let next = sub.base.shifted(&proj, &outcome.b)?;
            if !next.is_finite() {
                return Err(Error::NonFinite(format!("weights after outer iteration {k}")));
            }
            trace.rows.push(TraceRow {
                k,
                f,
                grad_sq_norm: grad_sq,
                eps_cert: outcome.certificate,
                inner_steps: outcome.steps,
                comm_bytes: outcome.comm_bytes,
                opt_state_entries: state_entries,
            });
            trace.certified.push(outcome.certified);
            *w = next;
        }
        let (f, grad_sq) = probe(objective, w, &full)?;
        if let Some(expected) = pending.take() {
            trace.telescoping_residuals.push(relative_gap(f, expected));
        }
        trace.rows.push(TraceRow {
            k: cfg.outer_iters,
            f,
            grad_sq_norm: grad_sq,
            eps_cert: None,
            inner_steps: 0,
            comm_bytes: 0,
            opt_state_entries: state_entries,
        });
        Ok(())
    };
    let aborted = match run(&mut w, &mut trace) {
        Ok(()) => None,
        Err(Error::NonFinite(what)) => Some(format!("non-finite {what}")),
        Err(e) => return Err(e),
    };
    Ok(TrainOutcome {
        params: w,
        trace,
        aborted,
    })
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub(crate) fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{LogisticProblem, QuadraticProblem};
    use crate::tensor::Matrix;

    fn quad() -> QuadraticProblem<f64> {
        QuadraticProblem::random(&[(16, 6), (12, 4)], 3).unwrap()
    }

    #[test]
    fn zero_outer_iterations_return_initial_weights() {
        let p = quad();
        let cfg = RsoConfig { outer_iters: 0, ranks: vec![4], ..RsoConfig::default() };
        let out = rso_train(&p, &cfg).unwrap();
        assert_eq!(out.params, p.initial_params());
        assert_eq!(out.trace.rows.len(), 1);
    }

    #[test]
    fn exact_solves_never_increase_f_and_telescope() {
        let p = quad();
        for kind in [ProjectionKind::Haar, ProjectionKind::Coordinate] {
            let cfg = RsoConfig {
                ranks: vec![4],
                projection: kind,
                solver: InnerSolver::Exact,
                outer_iters: 30,
                ..RsoConfig::default()
            };
            let out = rso_train(&p, &cfg).unwrap();
            let fs: Vec<f64> = out.trace.rows.iter().map(|r| r.f).collect();
            assert!(fs.windows(2).all(|w| w[1] <= w[0]), "{kind}");
            assert_eq!(out.trace.telescoping_residuals.len(), 30);
            assert!(out.trace.max_telescoping_residual() < 1e-12);
        }
    }

    #[test]
    fn full_rank_coordinate_step_is_full_space_proximal_point() {
        let shapes = [(6, 3)];
        let p = QuadraticProblem::<f64>::random(&shapes, 8).unwrap();
        let cfg = RsoConfig {
            ranks: vec![6],
            projection: ProjectionKind::Coordinate,
            solver: InnerSolver::Exact,
            outer_iters: 1,
            ..RsoConfig::default()
        };
        let out = rso_train(&p, &cfg).unwrap();
        // argmin_D ½‖W + D − W*‖² + ‖D‖²/(2η) = η/(1+η) (W* − W), η = 1/2.
        let eta = 0.5;
        let w0 = &p.initial_params().layers[0];
        let oracle = w0.add(&p.target().layers[0].sub(w0).unwrap().scale(eta / (1.0 + eta))).unwrap();
        assert!(out.params.layers[0].sub(&oracle).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn deterministic_given_seed() {
        let p = LogisticProblem::<f64>::synthetic(64, 12, 16, 1e-3, 1).unwrap();
        let cfg = RsoConfig {
            ranks: vec![4],
            solver: InnerSolver::Sgd { lr: Some(0.5) },
            inner_steps: 5,
            outer_iters: 10,
            seed: 42,
            ..RsoConfig::default()
        };
        let a = rso_train(&p, &cfg).unwrap().trace.to_csv();
        let b = rso_train(&p, &cfg).unwrap().trace.to_csv();
        assert_eq!(a, b);
        let c = rso_train(&p, &RsoConfig { seed: 43, ..cfg }).unwrap().trace.to_csv();
        assert_ne!(a, c);
    }

    #[test]
    fn eta_is_required_without_smoothness() {
        struct Opaque(QuadraticProblem<f64>);
        impl Objective<f64> for Opaque {
            type Batch = ();
            fn name(&self) -> &'static str {
                "opaque"
            }
            fn layer_shapes(&self) -> Vec<(usize, usize)> {
                self.0.layer_shapes()
            }
            fn initial_params(&self) -> ParamSet<f64> {
                self.0.initial_params()
            }
            fn full_batch(&self) {}
            fn sample_batch(&self, _: &mut RngStream) {}
            fn is_stochastic(&self) -> bool {
                false
            }
            fn evaluate(&self, w: &ParamSet<f64>, b: &()) -> Result<crate::objectives::Evaluation<f64>> {
                self.0.evaluate(w, b)
            }
        }
        let cfg = RsoConfig { ranks: vec![2], outer_iters: 1, ..RsoConfig::default() };
        assert!(matches!(rso_train(&Opaque(quad()), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rank_above_rows_is_rejected() {
        let cfg = RsoConfig { ranks: vec![13], ..RsoConfig::default() };
        assert!(rso_train(&quad(), &cfg).is_err());
    }

    #[test]
    fn non_finite_run_aborts_with_partial_trace() {
        let init = ParamSet::new(vec![Matrix::filled(4, 2, 1.0)]);
        let target = ParamSet::new(vec![Matrix::filled(4, 2, 0.0)]);
        let p = QuadraticProblem::from_parts(init, target).unwrap();
        // A huge step makes the iterates diverge to infinity.
        let cfg = RsoConfig {
            ranks: vec![2],
            eta: Some(1e300),
            solver: InnerSolver::Gd { lr: Some(1e300) },
            inner_steps: 3,
            outer_iters: 10,
            ..RsoConfig::default()
        };
        let out = rso_train(&p, &cfg).unwrap();
        assert!(out.aborted.is_some());
        assert!(out.trace.rows.len() < 11);
    }
}
