//! Training objectives `f(W) = E_ξ[F(W; ξ)]` with exact gradients with
//! respect to the full weights `W` or the subspace variables `B` of
//! `W + P B`.

mod corpus;
pub mod gradcheck;
mod logistic;
mod quadratic;
mod tiny_lm;
pub mod transformer;

pub use corpus::Corpus;
pub use logistic::LogisticProblem;
pub use quadratic::{quadratic_loss, QuadraticProblem};
pub use tiny_lm::{TinyLm, TinyLmConfig};

use crate::error::{Error, Result};
use crate::projection::ProjectionSet;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, RngStream};

/// Full parameter family. `layers` are the projected weights `W_ℓ`
/// (`m_ℓ × n_ℓ`); `dense` holds parameters that are always trained
/// full-rank, such as embeddings and an output head.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub layers: Vec<Matrix<T>>,
    pub dense: Vec<Matrix<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(layers: Vec<Matrix<T>>) -> Self {
        Self {
            layers,
            dense: Vec::new(),
        }
    }

    pub fn with_dense(layers: Vec<Matrix<T>>, dense: Vec<Matrix<T>>) -> Self {
        Self { layers, dense }
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(Matrix::shape).collect()
    }

    /// `‖W‖² = Σ_ℓ ‖W_ℓ‖_F²` over layers and dense parameters.
    pub fn norm_sq(&self) -> T {
        self.layers
            .iter()
            .chain(&self.dense)
            .map(Matrix::frob_norm_sq)
            .sum()
    }

    pub fn entry_count(&self) -> usize {
        self.layers.iter().chain(&self.dense).map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            layers: self.layers.iter().map(z).collect(),
            dense: self.dense.iter().map(z).collect(),
        }
    }

    /// `W + P B` layer-wise; dense parameters are copied.
    pub fn shifted(&self, proj: &ProjectionSet<T>, b: &SubspaceParams<T>) -> Result<Self> {
        if proj.len() != self.layers.len() || b.layers.len() != self.layers.len() {
            return Err(Error::shape(
                "ParamSet::shifted",
                format!(
                    "{} layers, {} projections, {} subspace blocks",
                    self.layers.len(),
                    proj.len(),
                    b.layers.len()
                ),
            ));
        }
        let layers = self
            .layers
            .iter()
            .zip(&proj.mats)
            .zip(&b.layers)
            .map(|((w, p), b)| w.add_product(p, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            dense: self.dense.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().chain(&self.dense).all(Matrix::is_finite)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let diff = |a: &[Matrix<T>], b: &[Matrix<T>]| {
            a.iter().zip(b).map(|(x, y)| x.sub(y)).collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            layers: diff(&self.layers, &other.layers)?,
            dense: diff(&self.dense, &other.dense)?,
        })
    }
}

/// Subspace variables `B_ℓ` of shape `r_ℓ × n_ℓ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceParams<T> {
    pub layers: Vec<Matrix<T>>,
}

impl<T: Scalar> SubspaceParams<T> {
    /// The zero point `B = 0` conforming to `proj` and the layer shapes.
    pub fn zeros(proj: &ProjectionSet<T>, layer_shapes: &[(usize, usize)]) -> Self {
        Self {
            layers: proj
                .mats
                .iter()
                .zip(layer_shapes)
                .map(|(p, &(_, n))| Matrix::zeros(p.cols(), n))
                .collect(),
        }
    }

    pub fn norm_sq(&self) -> T {
        self.layers.iter().map(Matrix::frob_norm_sq).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|m| m.as_slice().iter().all(|&x| x == T::zero()))
    }

    /// Total dimension `Σ_ℓ r_ℓ n_ℓ`.
    pub fn dim(&self) -> usize {
        self.layers.iter().map(Matrix::len).sum()
    }

    /// All entries, layer after layer in row-major order.
    pub fn flatten(&self) -> Vec<T> {
        self.layers.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.dim() {
            return Err(Error::shape(
                "SubspaceParams::unflatten",
                format!("{} values for dimension {}", flat.len(), self.dim()),
            ));
        }
        let mut rest = flat;
        for m in &mut self.layers {
            let (head, tail) = rest.split_at(m.len());
            m.as_mut_slice().copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }
}

/// Loss value and gradients at one point.
///
/// `layer_grads` are `∂W_ℓ` for a full evaluation and `∂B_ℓ` for a subspace
/// evaluation; `dense_grads` are always full.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub loss: T,
    pub layer_grads: Vec<Matrix<T>>,
    pub dense_grads: Vec<Matrix<T>>,
}

impl<T: Scalar> Evaluation<T> {
    pub fn grad_norm_sq(&self) -> T {
        self.layer_grads
            .iter()
            .chain(&self.dense_grads)
            .map(Matrix::frob_norm_sq)
            .sum()
    }
}

/// A differentiable training problem.
///
/// Implementors supply full-weight evaluation; subspace evaluation defaults
/// to forming `W + P B` and applying the chain rule `∂B = Pᵀ ∂W`. Models that
/// can avoid materializing full-size activations override it.
pub trait Objective<T: Scalar>: Sync {
    /// One stochastic draw `ξ`, or the full data set.
    type Batch: Send + Sync;

    fn name(&self) -> &'static str;

    /// `(m_ℓ, n_ℓ)` per projected layer.
    fn layer_shapes(&self) -> Vec<(usize, usize)>;

    /// Layers with equal group ids share one projection matrix.
    fn projection_groups(&self) -> Vec<usize> {
        (0..self.layer_shapes().len()).collect()
    }

    fn initial_params(&self) -> ParamSet<T>;

    /// The batch defining the deterministic objective `f`.
    fn full_batch(&self) -> Self::Batch;

    fn sample_batch(&self, rng: &mut RngStream) -> Self::Batch;

    /// Whether `sample_batch` differs from `full_batch`.
    fn is_stochastic(&self) -> bool;

    fn evaluate(&self, params: &ParamSet<T>, batch: &Self::Batch) -> Result<Evaluation<T>>;

    fn loss(&self, params: &ParamSet<T>, batch: &Self::Batch) -> Result<T> {
        Ok(self.evaluate(params, batch)?.loss)
    }

    /// Value of `F(W + P B)` and its gradient with respect to `B`.
    fn evaluate_subspace(
        &self,
        params: &ParamSet<T>,
        proj: &ProjectionSet<T>,
        b: &SubspaceParams<T>,
        batch: &Self::Batch,
    ) -> Result<Evaluation<T>> {
        let shifted = params.shifted(proj, b)?;
        let eval = self.evaluate(&shifted, batch)?;
        Ok(Evaluation {
            loss: eval.loss,
            layer_grads: proj.project(&eval.layer_grads)?,
            dense_grads: eval.dense_grads,
        })
    }

    fn loss_subspace(
        &self,
        params: &ParamSet<T>,
        proj: &ProjectionSet<T>,
        b: &SubspaceParams<T>,
        batch: &Self::Batch,
    ) -> Result<T> {
        self.loss(&params.shifted(proj, b)?, batch)
    }

    /// Smoothness constant `L` of `f`, when known.
    fn smoothness(&self) -> Option<f64> {
        None
    }

    /// `f* = inf f`, when known.
    fn optimal_value(&self) -> Option<f64> {
        None
    }

    /// Closed-form minimizer of `f(W + P B) + ‖B‖²/(2η)`, when available.
    fn exact_subproblem(
        &self,
        _params: &ParamSet<T>,
        _proj: &ProjectionSet<T>,
        _eta: T,
    ) -> Option<Result<SubspaceParams<T>>> {
        None
    }
}
