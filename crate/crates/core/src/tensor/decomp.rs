//! Householder QR, one-sided Jacobi SVD and a Cholesky solve.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Thin QR of a tall matrix via Householder reflections.
///
/// Returns `(q, r)` with `q` of shape `m × n` having orthonormal columns and
/// `r` upper triangular `n × n` with a strictly positive diagonal. The sign
/// correction makes `q` Haar-distributed when `a` has i.i.d. Gaussian entries.
pub fn qr_thin<T: Scalar>(a: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::shape("qr_thin", format!("need rows >= cols, got {m}x{n}")));
    }
    let a_norm = a.frob_norm();
    let tol = T::of(1e-12) * a_norm;

    // Work column-major: each column is contiguous for the reflections.
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| a.column(j)).collect();
    let mut reflectors: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut r = Matrix::zeros(n, n);

    for k in 0..n {
        let x = &cols[k][k..];
        let norm_x = x.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm_x <= tol || norm_x == T::zero() {
            return Err(Error::Degenerate(format!(
                "qr_thin: column {k} is (numerically) dependent, |r_kk| = {norm_x} < 1e-12·‖a‖"
            )));
        }
        // v = x + sign(x0)‖x‖e1 avoids cancellation.
        let alpha = if x[0] >= T::zero() { -norm_x } else { norm_x };
        let mut v: Vec<T> = x.to_vec();
        v[0] -= alpha;
        let v_norm_sq: T = v.iter().map(|&t| t * t).sum();
        for col in cols.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let proj = tail.iter().zip(&v).map(|(&c, &vi)| c * vi).sum::<T>();
            let coef = (proj + proj) / v_norm_sq;
            for (c, &vi) in tail.iter_mut().zip(&v) {
                *c -= coef * vi;
            }
        }
        for i in 0..=k {
            r[(i, k)] = cols[k][i];
        }
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q_cols: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut e = vec![T::zero(); m];
            e[j] = T::one();
            e
        })
        .collect();
    for k in (0..n).rev() {
        let v = &reflectors[k];
        let v_norm_sq: T = v.iter().map(|&t| t * t).sum();
        for col in q_cols.iter_mut() {
            let tail = &mut col[k..];
            let proj = tail.iter().zip(v).map(|(&c, &vi)| c * vi).sum::<T>();
            let coef = (proj + proj) / v_norm_sq;
            for (c, &vi) in tail.iter_mut().zip(v) {
                *c -= coef * vi;
            }
        }
    }

    let mut q = Matrix::zeros(m, n);
    for (j, col) in q_cols.iter().enumerate() {
        q.set_column(j, col);
    }
    for k in 0..n {
        if r[(k, k)] < T::zero() {
            for j in k..n {
                r[(k, j)] = -r[(k, j)];
            }
            for i in 0..m {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    Ok((q, r))
}

/// Top-`rank` left singular vectors of `a` by one-sided (Hestenes) Jacobi.
///
/// Returns `(u, sigma)` with `u` of shape `rows × rank` and singular values in
/// descending order. When `a` has fewer than `rank` nonzero singular values
/// the remaining columns of `u` complete an orthonormal set.
pub fn left_singular_vectors<T: Scalar>(
    a: &Matrix<T>,
    rank: usize,
    max_sweeps: usize,
) -> Result<(Matrix<T>, Vec<T>)> {
    let (m, n) = a.shape();
    if rank == 0 || rank > m {
        return Err(Error::shape(
            "left_singular_vectors",
            format!("rank {rank} for a {m}x{n} matrix"),
        ));
    }
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| a.column(j)).collect();
    let eps = T::epsilon() * T::of(4.0);
    // Columns below this squared norm are numerically zero and never rotated.
    let floor = (eps * a.frob_norm()).powi(2);
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: T = cols[p].iter().map(|&x| x * x).sum();
                let beta: T = cols[q].iter().map(|&x| x * x).sum();
                let gamma: T = cols[p].iter().zip(&cols[q]).map(|(&x, &y)| x * y).sum();
                if alpha <= floor
                    || beta <= floor
                    || gamma.abs() <= eps * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence("one-sided Jacobi SVD"));
    }

    let mut order: Vec<(T, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().map(|&x| x * x).sum::<T>().sqrt(), j))
        .collect();
    order.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(std::cmp::Ordering::Equal).then(x.1.cmp(&y.1)));

    let sigma_max = order.first().map_or(T::zero(), |o| o.0);
    let cutoff = sigma_max * T::of(1e-12);
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(rank);
    let mut sigma = Vec::with_capacity(rank);
    for &(s, j) in order.iter().take(rank) {
        if s <= cutoff || s == T::zero() {
            break;
        }
        basis.push(cols[j].iter().map(|&x| x / s).collect());
        sigma.push(s);
    }
    // Complete with standard basis vectors orthogonalized against the span.
    let mut e_idx = 0;
    while basis.len() < rank && e_idx < m {
        let mut v = vec![T::zero(); m];
        v[e_idx] = T::one();
        e_idx += 1;
        for _ in 0..2 {
            for b in &basis {
                let proj: T = b.iter().zip(&v).map(|(&x, &y)| x * y).sum();
                for (vi, &bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
        }
        let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm > T::of(1e-6) {
            basis.push(v.into_iter().map(|x| x / norm).collect());
            sigma.push(T::zero());
        }
    }
    let mut u = Matrix::zeros(m, rank);
    for (j, b) in basis.iter().enumerate() {
        u.set_column(j, b);
    }
    Ok((u, sigma))
}

/// Solves `a x = b` for symmetric positive definite `a` via Cholesky.
pub fn solve_spd<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::shape(
            "solve_spd",
            format!("{:?} \\ {:?}", a.shape(), b.shape()),
        ));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) {
            return Err(Error::Degenerate("solve_spd: matrix not positive definite".into()));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}
