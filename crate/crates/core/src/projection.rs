//! Random subspace projections `P ∈ ℝ^{m×r}`.
//!
//! The Haar and coordinate families satisfy `PᵀP = (m/r)·I` exactly and
//! `E[PPᵀ] = I`. The Gaussian family only satisfies the first identity
//! approximately; the convergence harness refuses it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{qr_thin, Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// `√(m/r)·Q` with `Q` a Haar-distributed orthonormal frame.
    Haar,
    /// `√(m/r)` times `r` distinct standard basis columns.
    Coordinate,
    /// i.i.d. `N(0, 1/r)` entries.
    GaussianApprox,
}

impl ProjectionKind {
    /// Whether `PᵀP = (m/r)I` holds exactly for every draw.
    pub fn is_exact_isometry(self) -> bool {
        matches!(self, ProjectionKind::Haar | ProjectionKind::Coordinate)
    }
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionKind::Haar => "haar",
            ProjectionKind::Coordinate => "coordinate",
            ProjectionKind::GaussianApprox => "gaussian_approx",
        })
    }
}

impl FromStr for ProjectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "haar" => Ok(ProjectionKind::Haar),
            "coordinate" => Ok(ProjectionKind::Coordinate),
            "gaussian_approx" | "gaussian" => Ok(ProjectionKind::GaussianApprox),
            other => Err(Error::Config(format!("unknown projection kind `{other}`"))),
        }
    }
}

/// Samples one `m × r` projection matrix.
pub fn sample_projection<T: Scalar>(
    rng: &mut RngStream,
    m: usize,
    r: usize,
    kind: ProjectionKind,
) -> Result<Matrix<T>> {
    if r == 0 || r > m {
        return Err(Error::shape(
            "sample_projection",
            format!("need 1 <= r <= m, got m={m}, r={r}"),
        ));
    }
    let scale = T::of((m as f64 / r as f64).sqrt());
    match kind {
        ProjectionKind::Haar => {
            // A Gaussian draw is full rank with probability one; retry on the
            // measure-zero failure rather than propagate it.
            loop {
                let g: Matrix<T> = rng.gauss(m, r, 1.0)?;
                match qr_thin(&g) {
                    Ok((q, _)) => return Ok(q.scale(scale)),
                    Err(Error::Degenerate(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
        ProjectionKind::Coordinate => {
            let mut p = Matrix::zeros(m, r);
            for (col, row) in rng.sample_indices(m, r).into_iter().enumerate() {
                p[(row, col)] = scale;
            }
            Ok(p)
        }
        ProjectionKind::GaussianApprox => rng.gauss(m, r, (1.0 / r as f64).sqrt()),
    }
}

/// `max_ij |(PᵀP − (m/r)I)_ij|`.
pub fn verify_isometry<T: Scalar>(p: &Matrix<T>, m: usize, r: usize) -> Result<f64> {
    if p.shape() != (m, r) {
        return Err(Error::shape(
            "verify_isometry",
            format!("expected {m}x{r}, got {:?}", p.shape()),
        ));
    }
    let ptp = p.matmul_tn(p)?;
    let target = m as f64 / r as f64;
    let mut worst = 0.0f64;
    for i in 0..r {
        for j in 0..r {
            let expect = if i == j { target } else { 0.0 };
            worst = worst.max((ptp[(i, j)].to_f64_lossy() - expect).abs());
        }
    }
    Ok(worst)
}

/// Monte-Carlo estimate of `‖(1/trials)·Σ P_t P_tᵀ − I‖_F / √m`.
pub fn verify_expectation_identity(
    rng: &mut RngStream,
    m: usize,
    r: usize,
    kind: ProjectionKind,
    trials: usize,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Config("verify_expectation_identity: trials must be >= 1".into()));
    }
    let mut acc = Matrix::<f64>::zeros(m, m);
    for _ in 0..trials {
        let p: Matrix<f64> = sample_projection(rng, m, r, kind)?;
        match kind {
            // Only the r diagonal entries are nonzero; skip the dense product.
            ProjectionKind::Coordinate => {
                for c in 0..r {
                    for i in 0..m {
                        let v = p[(i, c)];
                        if v != 0.0 {
                            acc[(i, i)] += v * v;
                        }
                    }
                }
            }
            _ => {
                let ppt = p.matmul_nt(&p)?;
                acc.axpy(1.0, &ppt)?;
            }
        }
    }
    acc.scale_in_place(1.0 / trials as f64);
    let dev = acc.sub(&Matrix::identity(m))?;
    Ok(dev.frob_norm() / (m as f64).sqrt())
}

/// One projection per layer. Layers in the same group share a matrix, e.g.
/// the attention query/key/value weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet<T> {
    pub kind: ProjectionKind,
    pub mats: Vec<Matrix<T>>,
}

impl<T: Scalar> ProjectionSet<T> {
    /// Samples `P^k` for outer iteration `k`. Each group draws from its own
    /// stream derived from `(seed, group, k)`, so the result does not depend
    /// on sampling order.
    pub fn sample(
        seed: u64,
        outer_iter: u64,
        layer_shapes: &[(usize, usize)],
        ranks: &[usize],
        groups: &[usize],
        kind: ProjectionKind,
    ) -> Result<Self> {
        if ranks.len() != layer_shapes.len() || groups.len() != layer_shapes.len() {
            return Err(Error::Config(format!(
                "{} layers but {} ranks and {} groups",
                layer_shapes.len(),
                ranks.len(),
                groups.len()
            )));
        }
        let mut by_group: Vec<(usize, Matrix<T>)> = Vec::new();
        let mut mats = Vec::with_capacity(layer_shapes.len());
        for (layer, (&(m, _), &r)) in layer_shapes.iter().zip(ranks).enumerate() {
            let group = groups[layer];
            if let Some((_, p)) = by_group.iter().find(|(g, _)| *g == group) {
                if p.shape() != (m, r) {
                    return Err(Error::Config(format!(
                        "layer {layer} shares projection group {group} but needs {m}x{r}, group has {:?}",
                        p.shape()
                    )));
                }
                mats.push(p.clone());
                continue;
            }
            let mut rng = RngStream::derived(seed, &[streams::PROJECTION, group as u64, outer_iter]);
            let p = sample_projection(&mut rng, m, r, kind)?;
            by_group.push((group, p.clone()));
            mats.push(p);
        }
        Ok(Self { kind, mats })
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.mats.iter().map(|p| p.cols()).collect()
    }

    /// `max_ℓ m_ℓ / r_ℓ`, the factor inflating `L` to `L̂`.
    pub fn max_ratio(&self) -> f64 {
        self.mats
            .iter()
            .map(|p| p.rows() as f64 / p.cols() as f64)
            .fold(0.0, f64::max)
    }

    /// Layer-wise `Pᵀ G`.
    pub fn project(&self, grads: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        self.mats
            .iter()
            .zip(grads)
            .map(|(p, g)| p.matmul_tn(g))
            .collect()
    }

    /// Layer-wise `P B`.
    pub fn lift(&self, b: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        self.mats.iter().zip(b).map(|(p, b)| p.matmul(b)).collect()
    }
}

/// Stream purpose tags for [`RngStream::derived`].
pub mod streams {
    pub const PROJECTION: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const ZO: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PAIRS: u64 = 5;
    pub const DATA: u64 = 6;
}
