use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::objectives::{Evaluation, Objective, ParamSet};
use crate::projection::streams;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, RngStream};

/// Ridge-regularized binary logistic regression with a single `d × 1`
/// weight layer. A batch is a list of sample indices.
#[derive(Debug)]
pub struct LogisticProblem<T> {
    features: Matrix<T>,
    labels: Vec<T>,
    batch_size: usize,
    ridge: T,
    optimum: OnceLock<f64>,
}

impl<T: Scalar> Clone for LogisticProblem<T> {
    fn clone(&self) -> Self {
        Self {
            features: self.features.clone(),
            labels: self.labels.clone(),
            batch_size: self.batch_size,
            ridge: self.ridge,
            optimum: self.optimum.clone(),
        }
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eᶻ)` without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

impl<T: Scalar> LogisticProblem<T> {
    pub fn from_data(features: Matrix<T>, labels: Vec<T>, batch_size: usize, ridge: f64) -> Result<Self> {
        if features.rows() != labels.len() || features.rows() == 0 {
            return Err(Error::shape(
                "LogisticProblem::from_data",
                format!("{} samples, {} labels", features.rows(), labels.len()),
            ));
        }
        if batch_size == 0 || ridge < 0.0 {
            return Err(Error::Config(format!(
                "logistic: batch_size {batch_size}, ridge {ridge}"
            )));
        }
        let samples = features.rows();
        Ok(Self {
            features,
            labels,
            batch_size: batch_size.min(samples),
            ridge: T::of(ridge),
            optimum: OnceLock::new(),
        })
    }

    /// Features `N(0, 1)`; labels drawn from a planted logistic model with
    /// weights `N(0, 4/d)`.
    pub fn synthetic(samples: usize, dim: usize, batch_size: usize, ridge: f64, seed: u64) -> Result<Self> {
        let mut rng = RngStream::derived(seed, &[streams::DATA]);
        let features: Matrix<T> = rng.gauss(samples, dim, 1.0)?;
        let planted: Matrix<T> = rng.gauss(dim, 1, 2.0 / (dim as f64).sqrt())?;
        let logits = features.matmul(&planted)?;
        let labels = logits
            .as_slice()
            .iter()
            .map(|&z| {
                if rng.uniform() < sigmoid(z).to_f64_lossy() {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        Self::from_data(features, labels, batch_size, ridge)
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn samples(&self) -> usize {
        self.features.rows()
    }

    fn loss_grad(&self, w: &Matrix<T>, batch: &[usize]) -> Result<(T, Matrix<T>)> {
        if batch.is_empty() {
            return Err(Error::Config("logistic: empty batch".into()));
        }
        if w.shape() != (self.dim(), 1) {
            return Err(Error::shape(
                "logistic_loss",
                format!("weights {:?}, features have {} columns", w.shape(), self.dim()),
            ));
        }
        let mut loss = T::zero();
        let mut grad = Matrix::zeros(self.dim(), 1);
        for &i in batch {
            let x = self.features.row(i);
            let z: T = x.iter().zip(w.as_slice()).map(|(&a, &b)| a * b).sum();
            let y = self.labels[i];
            loss += softplus(z) - y * z;
            let residual = sigmoid(z) - y;
            for (g, &a) in grad.as_mut_slice().iter_mut().zip(x) {
                *g += residual * a;
            }
        }
        let inv = T::one() / T::of_usize(batch.len());
        grad.scale_in_place(inv);
        grad.axpy(self.ridge, w)?;
        let loss = loss * inv + T::of(0.5) * self.ridge * w.frob_norm_sq();
        if !loss.is_finite() {
            return Err(Error::NonFinite("logistic loss".into()));
        }
        Ok((loss, grad))
    }

    /// `λ_max(XᵀX)/(4N) + λ` by power iteration on the `d × d` Gram matrix.
    fn smoothness_estimate(&self) -> f64 {
        let x: Matrix<f64> = self.features.cast();
        let gram = x.matmul_tn(&x).expect("gram shape");
        let d = gram.rows();
        let mut v = Matrix::filled(d, 1, 1.0 / (d as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w = gram.matmul(&v).expect("gram shape");
            let norm = w.frob_norm();
            if norm == 0.0 {
                break;
            }
            lambda = norm;
            v = w.scale(1.0 / norm);
        }
        // Power iteration approaches λ_max from below; a small margin keeps
        // the estimate an upper bound.
        lambda * (1.0 + 1e-6) / (4.0 * self.samples() as f64) + self.ridge.to_f64_lossy()
    }

    /// Full-batch gradient descent at step `1/L` until `‖∇f‖ < 1e-10`.
    fn optimum_by_gd(&self) -> f64 {
        let all: Vec<usize> = (0..self.samples()).collect();
        let step = T::of(1.0 / self.smoothness_estimate());
        let mut w = Matrix::zeros(self.dim(), 1);
        let mut best = f64::INFINITY;
        for _ in 0..1_000_000 {
            let Ok((f, g)) = self.loss_grad(&w, &all) else { break };
            best = best.min(f.to_f64_lossy());
            if g.frob_norm().to_f64_lossy() < 1e-10 {
                break;
            }
            w.axpy(-step, &g).expect("same shape");
        }
        best
    }
}

impl<T: Scalar> Objective<T> for LogisticProblem<T> {
    type Batch = Vec<usize>;

    fn name(&self) -> &'static str {
        "logistic"
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        vec![(self.dim(), 1)]
    }

    fn initial_params(&self) -> ParamSet<T> {
        ParamSet::new(vec![Matrix::zeros(self.dim(), 1)])
    }

    fn full_batch(&self) -> Vec<usize> {
        (0..self.samples()).collect()
    }

    fn sample_batch(&self, rng: &mut RngStream) -> Vec<usize> {
        rng.sample_indices(self.samples(), self.batch_size)
    }

    fn is_stochastic(&self) -> bool {
        self.batch_size < self.samples()
    }

    fn evaluate(&self, params: &ParamSet<T>, batch: &Vec<usize>) -> Result<Evaluation<T>> {
        let w = params
            .layers
            .first()
            .ok_or_else(|| Error::shape("logistic_loss", "no weight layer"))?;
        let (loss, grad) = self.loss_grad(w, batch)?;
        Ok(Evaluation {
            loss,
            layer_grads: vec![grad],
            dense_grads: Vec::new(),
        })
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.smoothness_estimate())
    }

    fn optimal_value(&self) -> Option<f64> {
        Some(*self.optimum.get_or_init(|| self.optimum_by_gd()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::gradcheck::{central_difference, relative_error};
    use crate::projection::{ProjectionKind, ProjectionSet};
    use crate::objectives::SubspaceParams;

    fn balanced() -> LogisticProblem<f64> {
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[-1.0, 0.5], &[0.3, -0.7], &[2.0, 1.0]]).unwrap();
        LogisticProblem::from_data(x, vec![1.0, 0.0, 1.0, 0.0], 4, 0.0).unwrap()
    }

    #[test]
    fn zero_weights_give_ln2() {
        let p = balanced();
        let e = p.evaluate(&p.initial_params(), &p.full_batch()).unwrap();
        assert!((e.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradient_at_zero_is_mean_half_minus_label_times_x() {
        let p = balanced();
        let e = p.evaluate(&p.initial_params(), &p.full_batch()).unwrap();
        // mean of (½ − y)·x over the four rows, by hand.
        let expected = [(-0.5 - 0.5 - 0.15 + 1.0) / 4.0, (-1.0 + 0.25 + 0.35 + 0.5) / 4.0];
        for (g, e) in e.layer_grads[0].as_slice().iter().zip(expected) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = balanced();
        assert!(p.evaluate(&p.initial_params(), &vec![]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = LogisticProblem::<f64>::synthetic(50, 6, 10, 1e-3, 3).unwrap();
        let mut rng = RngStream::new(0, 0);
        let w = ParamSet::new(vec![rng.gauss(6, 1, 0.5).unwrap()]);
        let batch = p.full_batch();
        let eval = p.evaluate(&w, &batch).unwrap();
        let numeric = central_difference(&w.layers[0], 1e-5, |x| {
            p.loss(&ParamSet::new(vec![x.clone()]), &batch)
        })
        .unwrap();
        assert!(relative_error(&eval.layer_grads[0], &numeric) < 1e-7);
    }

    #[test]
    fn subspace_gradient_is_projected_full_gradient() {
        let p = LogisticProblem::<f64>::synthetic(40, 8, 8, 1e-3, 5).unwrap();
        let w = p.initial_params();
        let proj = ProjectionSet::sample(1, 0, &p.layer_shapes(), &[3], &[0], ProjectionKind::Haar).unwrap();
        let mut rng = RngStream::new(2, 0);
        let b = SubspaceParams { layers: vec![rng.gauss(3, 1, 1.0).unwrap()] };
        let batch = p.full_batch();
        let sub = p.evaluate_subspace(&w, &proj, &b, &batch).unwrap();
        let full = p.evaluate(&w.shifted(&proj, &b).unwrap(), &batch).unwrap();
        let projected = proj.mats[0].matmul_tn(&full.layer_grads[0]).unwrap();
        assert!(relative_error(&sub.layer_grads[0], &projected) < 1e-10);
    }

    #[test]
    fn smoothness_bounds_curvature_and_optimum_is_stationary() {
        let p = LogisticProblem::<f64>::synthetic(100, 5, 100, 1e-2, 9).unwrap();
        let l = p.smoothness().unwrap();
        // Hessian ≼ XᵀX/(4N) + λI, so gradient differences are L-Lipschitz.
        let mut rng = RngStream::new(4, 0);
        for _ in 0..20 {
            let a: Matrix<f64> = rng.gauss(5, 1, 1.0).unwrap();
            let b: Matrix<f64> = rng.gauss(5, 1, 1.0).unwrap();
            let ga = p.loss_grad(&a, &p.full_batch()).unwrap().1;
            let gb = p.loss_grad(&b, &p.full_batch()).unwrap().1;
            assert!(ga.sub(&gb).unwrap().frob_norm() <= l * a.sub(&b).unwrap().frob_norm());
        }
        let f_star = p.optimal_value().unwrap();
        assert!(f_star < std::f64::consts::LN_2);
        assert!(f_star > 0.0);
    }
}
