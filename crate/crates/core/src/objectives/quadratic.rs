use crate::error::{Error, Result};
use crate::objectives::{Evaluation, Objective, ParamSet, SubspaceParams};
use crate::projection::{streams, ProjectionSet};
use crate::scalar::Scalar;
use crate::tensor::{solve_spd, RngStream};

/// `f = ½‖W − W*‖²` and `∇f = W − W*`.
pub fn quadratic_loss<T: Scalar>(w: &ParamSet<T>, target: &ParamSet<T>) -> Result<(T, ParamSet<T>)> {
    if w.layer_shapes() != target.layer_shapes() || w.dense.len() != target.dense.len() {
        return Err(Error::shape(
            "quadratic_loss",
            format!("{:?} vs {:?}", w.layer_shapes(), target.layer_shapes()),
        ));
    }
    let grad = w.sub(target)?;
    Ok((T::of(0.5) * grad.norm_sq(), grad))
}

/// Deterministic quadratic `½‖W − W*‖²`: 1-smooth with `f* = 0` and a
/// closed-form proximal subproblem. The reference problem for the
/// convergence-bound checks.
#[derive(Clone, Debug)]
pub struct QuadraticProblem<T> {
    init: ParamSet<T>,
    target: ParamSet<T>,
}

impl<T: Scalar> QuadraticProblem<T> {
    /// Random `W⁰` and `W*` with i.i.d. standard normal entries.
    pub fn random(shapes: &[(usize, usize)], seed: u64) -> Result<Self> {
        let mut rng = RngStream::derived(seed, &[streams::DATA]);
        let mut draw = || {
            shapes
                .iter()
                .map(|&(m, n)| rng.gauss(m, n, 1.0))
                .collect::<Result<Vec<_>>>()
        };
        let init = ParamSet::new(draw()?);
        let target = ParamSet::new(draw()?);
        Ok(Self { init, target })
    }

    pub fn from_parts(init: ParamSet<T>, target: ParamSet<T>) -> Result<Self> {
        if init.layer_shapes() != target.layer_shapes() {
            return Err(Error::shape("QuadraticProblem::from_parts", "init/target shapes differ"));
        }
        Ok(Self { init, target })
    }

    pub fn target(&self) -> &ParamSet<T> {
        &self.target
    }
}

impl<T: Scalar> Objective<T> for QuadraticProblem<T> {
    type Batch = ();

    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.target.layer_shapes()
    }

    fn initial_params(&self) -> ParamSet<T> {
        self.init.clone()
    }

    fn full_batch(&self) {}

    fn sample_batch(&self, _rng: &mut RngStream) {}

    fn is_stochastic(&self) -> bool {
        false
    }

    fn evaluate(&self, params: &ParamSet<T>, _batch: &()) -> Result<Evaluation<T>> {
        let (loss, grad) = quadratic_loss(params, &self.target)?;
        Ok(Evaluation {
            loss,
            layer_grads: grad.layers,
            dense_grads: grad.dense,
        })
    }

    fn smoothness(&self) -> Option<f64> {
        Some(1.0)
    }

    fn optimal_value(&self) -> Option<f64> {
        Some(0.0)
    }

    /// `B* = (PᵀP + I/η)⁻¹ Pᵀ(W* − W)` per layer; for exact isometries
    /// `PᵀP = (m/r)I` and the inverse is a scalar.
    fn exact_subproblem(
        &self,
        params: &ParamSet<T>,
        proj: &ProjectionSet<T>,
        eta: T,
    ) -> Option<Result<SubspaceParams<T>>> {
        let solve = || -> Result<SubspaceParams<T>> {
            let inv_eta = T::one() / eta;
            let mut layers = Vec::with_capacity(proj.len());
            for ((w, target), p) in params.layers.iter().zip(&self.target.layers).zip(&proj.mats) {
                let rhs = p.matmul_tn(&target.sub(w)?)?;
                let b = if proj.kind.is_exact_isometry() {
                    let ratio = T::of_usize(p.rows()) / T::of_usize(p.cols());
                    rhs.scale(T::one() / (ratio + inv_eta))
                } else {
                    let mut gram = p.matmul_tn(p)?;
                    for i in 0..gram.rows() {
                        gram[(i, i)] += inv_eta;
                    }
                    solve_spd(&gram, &rhs)?
                };
                layers.push(b);
            }
            Ok(SubspaceParams { layers })
        };
        Some(solve())
    }
}
