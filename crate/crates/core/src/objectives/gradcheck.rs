//! Central finite-difference gradient checks.

use serde::Serialize;

use super::transformer::{
    block_backward, block_forward, BlockMode, BlockOptions, BlockProjections, BlockSubspace, BlockWeights,
};
use super::{Objective, ParamSet};
use crate::error::Result;
use crate::projection::ProjectionKind;
use crate::tensor::{Matrix, RngStream};

const BLOCK_LAYER_NAMES: [&str; 6] = ["query", "key", "value", "out", "ffn_in", "ffn_out"];

/// Central differences of `f` at `x`, entry by entry. The step for entry
/// `x_ij` is `h · max(1, |x_ij|)`.
pub fn central_difference(
    x: &Matrix<f64>,
    h: f64,
    mut f: impl FnMut(&Matrix<f64>) -> Result<f64>,
) -> Result<Matrix<f64>> {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.len() {
        let orig = x.as_slice()[idx];
        let step = h * orig.abs().max(1.0);
        probe.as_mut_slice()[idx] = orig + step;
        let plus = f(&probe)?;
        probe.as_mut_slice()[idx] = orig - step;
        let minus = f(&probe)?;
        probe.as_mut_slice()[idx] = orig;
        grad.as_mut_slice()[idx] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Frobenius-relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both are zero.
pub fn relative_error(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let diff = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a.frob_norm().max(b.frob_norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Errors from checking one transformer block in subspace mode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockGradcheck {
    /// Finite-difference relative error of each `B` gradient, then the input.
    pub finite_difference: Vec<(String, f64)>,
    /// `‖∂B − Pᵀ ∂W|_{W+PB}‖` relative, worst over the six weights and the input.
    pub chain_rule: f64,
    /// `max |Z_rso − Z_full(W + P B)|`.
    pub reparameterization: f64,
}

impl BlockGradcheck {
    pub fn max_finite_difference(&self) -> f64 {
        self.finite_difference.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Random block with `s` positions, width `n`, rank `r`: checks every
/// subspace gradient and the input gradient of `⟨Z, U⟩` for a random `U`.
pub fn block_gradcheck(s: usize, n: usize, r: usize, seed: u64, causal: bool) -> Result<BlockGradcheck> {
    let mut rng = RngStream::new(seed, 0);
    let x: Matrix<f64> = rng.gauss(s, n, 1.0)?;
    let w = BlockWeights::random(n, &mut rng)?;
    let p = BlockProjections::random(n, r, ProjectionKind::Haar, &mut rng)?;
    let b = BlockSubspace::random(n, r, 0.1, &mut rng)?;
    let upstream: Matrix<f64> = rng.gauss(s, n, 1.0)?;
    let opts = BlockOptions { causal, index: 0 };
    let mode = BlockMode::Rso { proj: &p, sub: &b };

    let (z_rso, tape) = block_forward(&x, &w, mode, opts)?;
    let g = block_backward(&w, mode, &tape, &upstream)?;
    let mut finite_difference = Vec::with_capacity(7);
    for (idx, analytic) in g.layers().iter().enumerate() {
        let numeric = central_difference(b.layers()[idx], 1e-5, |probe| {
            let mut mats: Vec<Matrix<f64>> = b.layers().iter().map(|m| (*m).clone()).collect();
            mats[idx] = probe.clone();
            let shifted = BlockSubspace::from_layers(&mats)?;
            let (z, _) = block_forward(&x, &w, BlockMode::Rso { proj: &p, sub: &shifted }, opts)?;
            z.dot(&upstream)
        })?;
        finite_difference.push((BLOCK_LAYER_NAMES[idx].to_string(), relative_error(analytic, &numeric)));
    }
    let numeric_x = central_difference(&x, 1e-5, |probe| {
        let (z, _) = block_forward(probe, &w, mode, opts)?;
        z.dot(&upstream)
    })?;
    finite_difference.push(("input".to_string(), relative_error(&g.input, &numeric_x)));

    let eff = b.effective(&w, &p)?;
    let (z_full, full_tape) = block_forward(&x, &eff, BlockMode::Full, opts)?;
    let g_full = block_backward(&eff, BlockMode::Full, &full_tape, &upstream)?;
    let mut chain_rule = relative_error(&g.input, &g_full.input);
    for ((gb, gw), pl) in g.layers().iter().zip(g_full.layers()).zip(p.to_layers()) {
        chain_rule = chain_rule.max(relative_error(gb, &pl.matmul_tn(gw)?));
    }
    Ok(BlockGradcheck {
        finite_difference,
        chain_rule,
        reparameterization: z_rso.sub(&z_full)?.max_abs(),
    })
}

/// Finite-difference relative error of every gradient of `objective` at `w`
/// on `batch`; projected layers first, then dense parameters.
pub fn objective_gradcheck<O: Objective<f64>>(
    objective: &O,
    w: &ParamSet<f64>,
    batch: &O::Batch,
    h: f64,
) -> Result<Vec<f64>> {
    let eval = objective.evaluate(w, batch)?;
    let mut errors = Vec::new();
    for (idx, analytic) in eval.layer_grads.iter().enumerate() {
        let numeric = central_difference(&w.layers[idx], h, |probe| {
            let mut shifted = w.clone();
            shifted.layers[idx] = probe.clone();
            objective.loss(&shifted, batch)
        })?;
        errors.push(relative_error(analytic, &numeric));
    }
    for (idx, analytic) in eval.dense_grads.iter().enumerate() {
        let numeric = central_difference(&w.dense[idx], h, |probe| {
            let mut shifted = w.clone();
            shifted.dense[idx] = probe.clone();
            objective.loss(&shifted, batch)
        })?;
        errors.push(relative_error(analytic, &numeric));
    }
    Ok(errors)
}
