use crate::cost::encode_gradients;
use crate::error::{Error, Result};
use crate::objectives::{Objective, ParamSet, SubspaceParams};
use crate::projection::ProjectionSet;
use crate::scalar::Scalar;
use crate::solvers::{
    gd_step, inexactness_certificate, subproblem_constants, AdamState, InexactnessTarget, InnerSolver,
    MomentumState, ZoState,
};
use crate::tensor::{Matrix, RngStream};

/// `g(B) = f(W + P B) + ‖B‖² / (2η)` at fixed `W`, `P`, `η`.
///
/// Dense parameters (embeddings, head) live in `base` and may be updated by
/// the solver alongside `B`.
pub struct Subproblem<'a, T: Scalar, O: Objective<T>> {
    pub objective: &'a O,
    pub base: ParamSet<T>,
    pub proj: &'a ProjectionSet<T>,
    pub eta: T,
}

impl<'a, T: Scalar, O: Objective<T>> Subproblem<'a, T, O> {
    pub fn new(objective: &'a O, base: ParamSet<T>, proj: &'a ProjectionSet<T>, eta: T) -> Result<Self> {
        if !(eta > T::zero()) {
            return Err(Error::Config(format!("η must be positive, got {eta}")));
        }
        if proj.len() != base.layers.len() {
            return Err(Error::shape(
                "Subproblem::new",
                format!("{} projections for {} layers", proj.len(), base.layers.len()),
            ));
        }
        Ok(Self {
            objective,
            base,
            proj,
            eta,
        })
    }

    fn penalty(&self, b: &SubspaceParams<T>) -> T {
        b.norm_sq() / (T::of(2.0) * self.eta)
    }

    pub fn zero(&self) -> SubspaceParams<T> {
        SubspaceParams::zeros(self.proj, &self.base.layer_shapes())
    }

    pub fn value(&self, b: &SubspaceParams<T>, batch: &O::Batch) -> Result<T> {
        let f = self.objective.loss_subspace(&self.base, self.proj, b, batch)?;
        Ok(f + self.penalty(b))
    }

    /// `(g(B), ∇_B g, dense gradients)`.
    pub fn value_grad(
        &self,
        b: &SubspaceParams<T>,
        batch: &O::Batch,
    ) -> Result<(T, Vec<Matrix<T>>, Vec<Matrix<T>>)> {
        let eval = self.objective.evaluate_subspace(&self.base, self.proj, b, batch)?;
        let inv_eta = T::one() / self.eta;
        let mut grads = eval.layer_grads;
        for (g, bl) in grads.iter_mut().zip(&b.layers) {
            g.axpy(inv_eta, bl)?;
        }
        Ok((eval.loss + self.penalty(b), grads, eval.dense_grads))
    }
}

/// Run-scoped resources borrowed by the inner solver.
pub struct SolveContext<'a, T> {
    /// Minibatch and perturbation stream.
    pub rng: &'a mut RngStream,
    /// Full-rank Adam state for dense parameters, stepped with every
    /// first-order inner step.
    pub dense: Option<&'a mut AdamState<T>>,
    /// `L̂` when the objective's smoothness is known.
    pub l_hat: Option<f64>,
    /// Multiplies every inner step size.
    pub lr_scale: f64,
    /// Wire width of one gradient entry (2 or 4).
    pub comm_element_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct SolveOutcome<T> {
    pub b: SubspaceParams<T>,
    pub steps: usize,
    /// `‖∇g(B̃)‖²/(2μ)` on the full batch, when `μ > 0` is known.
    pub certificate: Option<f64>,
    /// The target was met: exact solve, fixed steps completed, or
    /// certificate at most `ε`.
    pub certified: bool,
    /// Serialized gradient bytes that a data-parallel run would exchange.
    pub comm_bytes: u64,
}

enum Stepper<T> {
    Gd(f64),
    Momentum(MomentumState<T>),
    Adam(AdamState<T>),
    Zo(ZoState),
}

fn default_lr(lr: Option<f64>, eta: f64, l_hat: Option<f64>) -> Result<f64> {
    match (lr, l_hat) {
        (Some(lr), _) => Ok(lr),
        (None, Some(l_hat)) => Ok(1.0 / subproblem_constants(eta, l_hat).1),
        (None, None) => Err(Error::Config(
            "inner step size required: objective smoothness is unknown".into(),
        )),
    }
}

/// Approximately minimizes `g` starting from `B = 0`.
pub fn solve_subproblem<T: Scalar, O: Objective<T>>(
    sub: &mut Subproblem<'_, T, O>,
    solver: &InnerSolver,
    target: InexactnessTarget,
    ctx: &mut SolveContext<'_, T>,
) -> Result<SolveOutcome<T>> {
    let eta = sub.eta.to_f64_lossy();
    let mu = ctx.l_hat.map(|l| subproblem_constants(eta, l).0);
    let full = sub.objective.full_batch();
    let certify = |sub: &Subproblem<'_, T, O>, b: &SubspaceParams<T>| -> Result<Option<f64>> {
        match mu {
            Some(mu) if mu > 0.0 => {
                let (_, g, _) = sub.value_grad(b, &full)?;
                let norm: T = g.iter().map(Matrix::frob_norm_sq).sum();
                Ok(Some(inexactness_certificate(norm.to_f64_lossy(), mu)?))
            }
            _ => Ok(None),
        }
    };

    // Every solve starts from the origin: g(0) = f(W) is what telescopes
    // across outer iterations.
    let mut b = sub.zero();

    if let InnerSolver::Exact = solver {
        let b = sub
            .objective
            .exact_subproblem(&sub.base, sub.proj, sub.eta)
            .ok_or_else(|| Error::Config(format!("{} has no closed-form subproblem", sub.objective.name())))??;
        let certificate = certify(sub, &b)?;
        return Ok(SolveOutcome {
            b,
            steps: 0,
            certificate,
            certified: true,
            comm_bytes: 0,
        });
    }

    let shapes: Vec<(usize, usize)> = b.layers.iter().map(Matrix::shape).collect();
    let scale = ctx.lr_scale;
    let mut stepper = match solver {
        InnerSolver::Gd { lr } | InnerSolver::Sgd { lr } => Stepper::Gd(default_lr(*lr, eta, ctx.l_hat)? * scale),
        InnerSolver::Momentum { lr, momentum } => {
            Stepper::Momentum(MomentumState::new(&shapes, default_lr(*lr, eta, ctx.l_hat)? * scale, *momentum)?)
        }
        InnerSolver::Adam(cfg) => {
            let mut cfg = *cfg;
            cfg.lr *= scale;
            Stepper::Adam(AdamState::new(&shapes, cfg)?)
        }
        InnerSolver::Zo { lr, radius } => {
            // The estimate's second moment is about d·‖∇g‖², so the default
            // step is 1/(d·L_g).
            let lr = match lr {
                Some(lr) => *lr,
                None => default_lr(None, eta, ctx.l_hat)? / b.dim() as f64,
            };
            Stepper::Zo(ZoState::new(*radius, lr * scale)?)
        }
        InnerSolver::Exact => unreachable!(),
    };

    let mut comm_bytes = 0u64;
    let stochastic = solver.is_stochastic() && sub.objective.is_stochastic();

    match target {
        InexactnessTarget::FixedSteps { steps } => {
            for _ in 0..steps {
                let batch = if stochastic {
                    sub.objective.sample_batch(ctx.rng)
                } else {
                    sub.objective.full_batch()
                };
                comm_bytes += step(sub, &mut stepper, &mut b, &batch, None, ctx)?;
            }
            let certificate = certify(sub, &b)?;
            Ok(SolveOutcome {
                b,
                steps,
                certificate,
                certified: true,
                comm_bytes,
            })
        }
        InexactnessTarget::Certified { eps, max_steps } => {
            if eps.is_infinite() && eps > 0.0 {
                return Ok(SolveOutcome {
                    b,
                    steps: 0,
                    certificate: None,
                    certified: true,
                    comm_bytes: 0,
                });
            }
            let mu = match mu {
                Some(mu) => mu,
                None => {
                    return Err(Error::Config(
                        "certified inner solves need the objective's smoothness constant".into(),
                    ))
                }
            };
            let mut best: Option<(f64, SubspaceParams<T>)> = None;
            let mut steps = 0;
            loop {
                let (_, grads, dense) = sub.value_grad(&b, &full)?;
                let norm: T = grads.iter().map(Matrix::frob_norm_sq).sum();
                let cert = inexactness_certificate(norm.to_f64_lossy(), mu)?;
                if best.as_ref().map_or(true, |(c, _)| cert < *c) {
                    best = Some((cert, b.clone()));
                }
                if cert <= eps {
                    return Ok(SolveOutcome {
                        b,
                        steps,
                        certificate: Some(cert),
                        certified: true,
                        comm_bytes,
                    });
                }
                if steps == max_steps {
                    break;
                }
                comm_bytes += step(sub, &mut stepper, &mut b, &full, Some((grads, dense)), ctx)?;
                steps += 1;
            }
            let (cert, b) = best.expect("at least one certificate evaluated");
            Ok(SolveOutcome {
                b,
                steps,
                certificate: Some(cert),
                certified: false,
                comm_bytes,
            })
        }
    }
}

/// One inner step; returns the communicated bytes. `known` reuses an
/// already computed gradient at `b` on `batch`.
fn step<T: Scalar, O: Objective<T>>(
    sub: &mut Subproblem<'_, T, O>,
    stepper: &mut Stepper<T>,
    b: &mut SubspaceParams<T>,
    batch: &O::Batch,
    known: Option<(Vec<Matrix<T>>, Vec<Matrix<T>>)>,
    ctx: &mut SolveContext<'_, T>,
) -> Result<u64> {
    if let Stepper::Zo(zo) = stepper {
        let mut flat = b.flatten();
        let mut probe = b.clone();
        let sub_ref: &Subproblem<'_, T, O> = sub;
        zo.step(
            &mut flat,
            |x| {
                let xs: Vec<T> = x.iter().map(|&v| T::of(v)).collect();
                probe.unflatten(&xs)?;
                Ok(sub_ref.value(&probe, batch)?.to_f64_lossy())
            },
            ctx.rng,
        )?;
        b.unflatten(&flat)?;
        // Two function values cross the wire per step.
        return Ok(2 * ctx.comm_element_bytes as u64);
    }
    let (grads, dense) = match known {
        Some(k) => k,
        None => {
            let (_, g, d) = sub.value_grad(b, batch)?;
            (g, d)
        }
    };
    let bytes = encode_gradients(&grads, ctx.comm_element_bytes)?.len() as u64;
    match stepper {
        Stepper::Gd(lr) => gd_step(&mut b.layers, &grads, *lr)?,
        Stepper::Momentum(m) => m.step(&mut b.layers, &grads)?,
        Stepper::Adam(a) => a.step(&mut b.layers, &grads, 1.0)?,
        Stepper::Zo(_) => unreachable!(),
    }
    if let Some(dense_state) = ctx.dense.as_deref_mut() {
        if !dense.is_empty() {
            dense_state.step(&mut sub.base.dense, &dense, 1.0)?;
        }
    }
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::QuadraticProblem;
    use crate::projection::ProjectionKind;

    fn setup(kind: ProjectionKind) -> (QuadraticProblem<f64>, ProjectionSet<f64>, f64) {
        let shapes = [(16, 4), (12, 3)];
        let problem = QuadraticProblem::random(&shapes, 5).unwrap();
        let proj = ProjectionSet::sample(9, 0, &shapes, &[4, 3], &[0, 1], kind).unwrap();
        let l_hat = proj.max_ratio();
        (problem, proj, l_hat)
    }

    fn ctx<'a>(rng: &'a mut RngStream, l_hat: f64) -> SolveContext<'a, f64> {
        SolveContext {
            rng,
            dense: None,
            l_hat: Some(l_hat),
            lr_scale: 1.0,
            comm_element_bytes: 4,
        }
    }

    #[test]
    fn zero_is_the_starting_point_and_g0_is_f() {
        let (p, proj, l_hat) = setup(ProjectionKind::Haar);
        let eta = 1.0 / (2.0 * l_hat);
        let sub = Subproblem::new(&p, p.initial_params(), &proj, eta).unwrap();
        let zero = sub.zero();
        assert!(zero.is_zero());
        assert_eq!(sub.value(&zero, &()).unwrap(), p.loss(&p.initial_params(), &()).unwrap());
    }

    #[test]
    fn infinite_target_returns_origin() {
        let (p, proj, l_hat) = setup(ProjectionKind::Haar);
        let mut sub = Subproblem::new(&p, p.initial_params(), &proj, 0.1).unwrap();
        let mut rng = RngStream::new(0, 0);
        let out = solve_subproblem(
            &mut sub,
            &InnerSolver::Gd { lr: None },
            InexactnessTarget::certified(f64::INFINITY, 10),
            &mut ctx(&mut rng, l_hat),
        )
        .unwrap();
        assert!(out.b.is_zero());
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn certified_gd_reaches_closed_form() {
        for kind in [ProjectionKind::Haar, ProjectionKind::Coordinate] {
            let (p, proj, l_hat) = setup(kind);
            let eta = 1.0 / (2.0 * l_hat);
            let mut sub = Subproblem::new(&p, p.initial_params(), &proj, eta).unwrap();
            let mut rng = RngStream::new(0, 0);
            let out = solve_subproblem(
                &mut sub,
                &InnerSolver::Gd { lr: None },
                InexactnessTarget::certified(1e-8, 100),
                &mut ctx(&mut rng, l_hat),
            )
            .unwrap();
            assert!(out.certified);
            let exact = p.exact_subproblem(&p.initial_params(), &proj, eta).unwrap().unwrap();
            let dist: f64 = out
                .b
                .layers
                .iter()
                .zip(&exact.layers)
                .map(|(a, e)| a.sub(e).unwrap().frob_norm_sq())
                .sum::<f64>()
                .sqrt();
            assert!(dist < 1e-3, "{kind}: {dist}");
        }
    }

    #[test]
    fn certificate_bounds_true_gap() {
        let mut rng = RngStream::new(4, 0);
        for trial in 0..100 {
            let shapes = [(8, 2)];
            let p = QuadraticProblem::<f64>::random(&shapes, 100 + trial).unwrap();
            let proj = ProjectionSet::sample(trial, 0, &shapes, &[2], &[0], ProjectionKind::Haar).unwrap();
            let l_hat = proj.max_ratio();
            let eta = 1.0 / (2.0 * l_hat);
            let mut sub = Subproblem::new(&p, p.initial_params(), &proj, eta).unwrap();
            let steps = 1 + (trial as usize % 4);
            let out = solve_subproblem(
                &mut sub,
                &InnerSolver::Gd { lr: None },
                InexactnessTarget::FixedSteps { steps },
                &mut ctx(&mut rng, l_hat),
            )
            .unwrap();
            let exact = p.exact_subproblem(&p.initial_params(), &proj, eta).unwrap().unwrap();
            let gap = sub.value(&out.b, &()).unwrap() - sub.value(&exact, &()).unwrap();
            assert!(out.certificate.unwrap() >= gap - 1e-14, "trial {trial}");
        }
    }

    #[test]
    fn certified_mode_requires_positive_strong_convexity() {
        let (p, proj, l_hat) = setup(ProjectionKind::Haar);
        let eta = 2.0 / l_hat;
        let mut sub = Subproblem::new(&p, p.initial_params(), &proj, eta).unwrap();
        let mut rng = RngStream::new(0, 0);
        let res = solve_subproblem(
            &mut sub,
            &InnerSolver::Gd { lr: Some(0.01) },
            InexactnessTarget::certified(1e-6, 10),
            &mut ctx(&mut rng, l_hat),
        );
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn step_cap_returns_best_iterate_uncertified() {
        let (p, proj, l_hat) = setup(ProjectionKind::Haar);
        let eta = 1.0 / (2.0 * l_hat);
        let mut sub = Subproblem::new(&p, p.initial_params(), &proj, eta).unwrap();
        let mut rng = RngStream::new(0, 0);
        let out = solve_subproblem(
            &mut sub,
            // The Haar subproblem is isotropic with curvature L_g, so the
            // default step would land on the minimizer at once.
            &InnerSolver::Gd { lr: Some(1e-3) },
            InexactnessTarget::Certified { eps: 1e-30, max_steps: 3 },
            &mut ctx(&mut rng, l_hat),
        )
        .unwrap();
        assert!(!out.certified);
        assert_eq!(out.steps, 3);
        assert!(out.certificate.unwrap() > 1e-30);
    }

    #[test]
    fn fixed_steps_run_exactly_and_count_bytes() {
        let (p, proj, l_hat) = setup(ProjectionKind::Coordinate);
        let mut sub = Subproblem::new(&p, p.initial_params(), &proj, 0.1).unwrap();
        let mut rng = RngStream::new(0, 0);
        let out = solve_subproblem(
            &mut sub,
            &InnerSolver::Adam(crate::solvers::AdamConfig { lr: 0.05, ..Default::default() }),
            InexactnessTarget::FixedSteps { steps: 7 },
            &mut ctx(&mut rng, l_hat),
        )
        .unwrap();
        assert_eq!(out.steps, 7);
        assert_eq!(out.comm_bytes, 7 * 4 * (4 * 4 + 3 * 3) as u64);
        assert!(sub.value(&out.b, &()).unwrap() < sub.value(&sub.zero(), &()).unwrap());
    }

    #[test]
    fn zeroth_order_inner_solver_descends() {
        let (p, proj, l_hat) = setup(ProjectionKind::Haar);
        let eta = 1.0 / (2.0 * l_hat);
        let mut sub = Subproblem::new(&p, p.initial_params(), &proj, eta).unwrap();
        let mut rng = RngStream::new(0, 0);
        let out = solve_subproblem(
            &mut sub,
            &InnerSolver::Zo { lr: None, radius: 1e-4 },
            InexactnessTarget::FixedSteps { steps: 200 },
            &mut ctx(&mut rng, l_hat),
        )
        .unwrap();
        assert_eq!(out.comm_bytes, 200 * 2 * 4);
        assert!(sub.value(&out.b, &()).unwrap() < sub.value(&sub.zero(), &()).unwrap());
    }
}
