//! Thin SVD by one-sided (Hestenes) Jacobi rotations.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin factorization `m = u * diag(sigma) * v^T` with `r = min(rows, cols)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }
}

/// Singular value decomposition of `m`.
///
/// Column pairs are swept in fixed cyclic order so the result is a pure
/// function of the input bits.
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidArgument("svd of an empty matrix".into()));
    }
    if let Some(index) = m.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "svd input",
            index,
        });
    }
    if m.rows() >= m.cols() {
        Ok(jacobi_tall(m))
    } else {
        // m^T = U' S V'^T  =>  m = V' S U'^T
        let f = jacobi_tall(&m.transpose());
        Ok(SvdFactors {
            u: f.v,
            sigma: f.sigma,
            v: f.u,
        })
    }
}

/// One-sided Jacobi for rows >= cols. Works column-major internally.
fn jacobi_tall(m: &Matrix) -> SvdFactors {
    let n = m.rows();
    let d = m.cols();
    let mut cols: Vec<Vec<f64>> = (0..d).map(|c| m.col(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..d)
        .map(|c| {
            let mut e = vec![0.0; d];
            e[c] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for i in 0..n {
                        a += cp[i] * cp[i];
                        b += cq[i] * cq[i];
                        g += cp[i] * cq[i];
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..d).collect();
    // Stable sort keeps ties in column order.
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
    let negligible = sigma_max * f64::EPSILON * (n.max(d) as f64);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut sorted_sigma = Vec::with_capacity(d);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        v_cols.push(v[j].clone());
        if sigma[j] > negligible && sigma[j] > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / sigma[j]).collect());
            sorted_sigma.push(sigma[j]);
        } else {
            // Null directions: filled with an orthonormal completion below.
            u_cols.push(vec![0.0; n]);
            sorted_sigma.push(0.0);
            pending.push(slot);
        }
    }
    complete_basis(&mut u_cols, &pending, n);

    SvdFactors {
        u: columns_to_matrix(&u_cols, n),
        sigma: sorted_sigma,
        v: columns_to_matrix(&v_cols, d),
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Replaces the columns listed in `pending` with unit vectors orthogonal to
/// every other column, by Gram-Schmidt over the standard basis.
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize], n: usize) {
    if pending.is_empty() {
        return;
    }
    let mut basis_index = 0;
    for &slot in pending {
        loop {
            assert!(basis_index < n, "basis completion ran out of candidates");
            let mut cand = vec![0.0; n];
            cand[basis_index] = 1.0;
            basis_index += 1;
            // Two passes of modified Gram-Schmidt for stability.
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == slot || (pending.contains(&k) && other.iter().all(|x| *x == 0.0)) {
                        continue;
                    }
                    let dot: f64 = cand.iter().zip(other).map(|(a, b)| a * b).sum();
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= dot * o;
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols[slot] = cand.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |r, c| cols[c][r])
}

/// Rank-`k` reconstruction `U[:, :k] diag(sigma[:k]) V[:, :k]^T`.
pub fn truncate_reconstruct(f: &SvdFactors, k: usize) -> Result<Matrix> {
    let r = f.rank_bound();
    if k == 0 || k > r {
        return Err(Error::InvalidArgument(format!(
            "truncation rank {k} outside [1, {r}]"
        )));
    }
    let rows = f.u.rows();
    let cols = f.v.rows();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let row = out.row_mut(i);
        for j in 0..k {
            let scale = f.u.get(i, j) * f.sigma[j];
            if scale == 0.0 {
                continue;
            }
            for (c, o) in row.iter_mut().enumerate() {
                *o += scale * f.v.get(c, j);
            }
        }
    }
    Ok(out)
}

/// Fraction of squared singular mass retained by the top `k` components.
pub fn variance_captured(f: &SvdFactors, k: usize) -> Result<f64> {
    let r = f.rank_bound();
    if k == 0 || k > r {
        return Err(Error::InvalidArgument(format!(
            "truncation rank {k} outside [1, {r}]"
        )));
    }
    let total: f64 = f.sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument(
            "degenerate activation matrix: all singular values are zero".into(),
        ));
    }
    if k == r {
        return Ok(1.0);
    }
    let head: f64 = f.sigma[..k].iter().map(|s| s * s).sum();
    Ok((head / total).min(1.0))
}
