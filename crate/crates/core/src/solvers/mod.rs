//! Inner solvers for the proximal subproblem and the first-order update
//! rules they share with the full-space baselines.

mod subproblem;
mod zo;

pub use subproblem::{solve_subproblem, SolveContext, SolveOutcome, Subproblem};
pub use zo::{zo_two_point_grad, ZoState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !betas_ok || !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eps >= 0.0) {
            return Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments with step counter, one pair per tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub t: u32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[(usize, usize)], cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Ok(Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        })
    }

    /// Scalars held in `M` and `V`.
    pub fn entries(&self) -> usize {
        self.m.iter().chain(&self.v).map(Matrix::len).sum()
    }

    /// Advances the moments with `grads` and returns the bias-corrected
    /// directions `M̂ / (√V̂ + ε)`, one per tensor.
    pub fn directions(&mut self, grads: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} moment buffers", grads.len(), self.m.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {i} is {:?}, moments {:?}", g.shape(), self.m[i].shape()),
                ));
            }
            g.ensure_finite(|| format!("adam gradient {i}"))?;
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(self.t as i32));
        let eps = T::of(c.eps);
        let mut dirs = Vec::with_capacity(grads.len());
        for ((m, v), g) in self.m.iter_mut().zip(&mut self.v).zip(grads) {
            let mut dir = Matrix::zeros(g.rows(), g.cols());
            for (((mi, vi), &gi), di) in m
                .as_mut_slice()
                .iter_mut()
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
                .zip(dir.as_mut_slice())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *di = m_hat / (v_hat.sqrt() + eps);
            }
            dirs.push(dir);
        }
        Ok(dirs)
    }

    /// `params ← params − α · M̂ / (√V̂ + ε)` with `α` scaled by `lr_scale`.
    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>], lr_scale: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam_step", "params/grads length"));
        }
        let dirs = self.directions(grads)?;
        let lr = T::of(self.cfg.lr * lr_scale);
        for (p, d) in params.iter_mut().zip(&dirs) {
            p.axpy(-lr, d)?;
        }
        Ok(())
    }
}

/// Heavy-ball momentum: `v ← μ v + g`, `params ← params − α v`.
#[derive(Clone, Debug)]
pub struct MomentumState<T> {
    pub velocity: Vec<Matrix<T>>,
    pub momentum: f64,
    pub lr: f64,
}

impl<T: Scalar> MomentumState<T> {
    pub fn new(shapes: &[(usize, usize)], lr: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || !(lr > 0.0) {
            return Err(Error::Config(format!("momentum {momentum}, lr {lr}")));
        }
        Ok(Self {
            velocity: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            momentum,
            lr,
        })
    }

    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>]) -> Result<()> {
        let mu = T::of(self.momentum);
        for ((v, p), g) in self.velocity.iter_mut().zip(params.iter_mut()).zip(grads) {
            g.ensure_finite(|| "momentum gradient".into())?;
            v.scale_in_place(mu);
            v.axpy(T::one(), g)?;
            p.axpy(-T::of(self.lr), v)?;
        }
        Ok(())
    }
}

/// Plain (stochastic) gradient step `params ← params − α g`.
pub fn gd_step<T: Scalar>(params: &mut [Matrix<T>], grads: &[Matrix<T>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("gd_step", "params/grads length"));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        g.ensure_finite(|| "gradient".into())?;
        p.axpy(-T::of(lr), g)?;
    }
    Ok(())
}

/// Upper bound `‖∇g(B)‖² / (2μ)` on `g(B) − min g` for a `μ`-strongly
/// convex `g`.
pub fn inexactness_certificate(grad_norm_sq: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!(
            "certificate needs positive strong convexity, got {mu} (use η < 1/L̂)"
        )));
    }
    Ok(grad_norm_sq / (2.0 * mu))
}

/// Strong-convexity and smoothness constants `(1/η − L̂, 1/η + L̂)` of the
/// subproblem.
pub fn subproblem_constants(eta: f64, l_hat: f64) -> (f64, f64) {
    (1.0 / eta - l_hat, 1.0 / eta + l_hat)
}

/// Algorithm for the inner subproblem. Step sizes default to `1/L_g` when
/// the objective's smoothness is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InnerSolver {
    /// Closed-form minimizer; only objectives that provide one.
    Exact,
    Gd {
        #[serde(default)]
        lr: Option<f64>,
    },
    Sgd {
        #[serde(default)]
        lr: Option<f64>,
    },
    Momentum {
        #[serde(default)]
        lr: Option<f64>,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam(AdamConfig),
    Zo {
        #[serde(default)]
        lr: Option<f64>,
        #[serde(default = "default_radius")]
        radius: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}

fn default_radius() -> f64 {
    1e-4
}

impl InnerSolver {
    pub fn name(&self) -> &'static str {
        match self {
            InnerSolver::Exact => "exact",
            InnerSolver::Gd { .. } => "gd",
            InnerSolver::Sgd { .. } => "sgd",
            InnerSolver::Momentum { .. } => "momentum",
            InnerSolver::Adam(_) => "adam",
            InnerSolver::Zo { .. } => "zo",
        }
    }

    /// Whether steps draw fresh minibatches rather than the full batch.
    pub fn is_stochastic(&self) -> bool {
        !matches!(self, InnerSolver::Exact | InnerSolver::Gd { .. })
    }
}

/// When to stop the inner solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InexactnessTarget {
    /// Exactly `steps` solver steps.
    FixedSteps { steps: usize },
    /// Iterate on the full batch until the certificate is at most `eps`, or
    /// `max_steps` steps have run.
    Certified { eps: f64, max_steps: usize },
}

impl InexactnessTarget {
    /// Certified mode with the default cap of `10 · steps`.
    pub fn certified(eps: f64, steps: usize) -> Self {
        InexactnessTarget::Certified {
            eps,
            max_steps: 10 * steps,
        }
    }
}
