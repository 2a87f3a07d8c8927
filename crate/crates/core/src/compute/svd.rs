//! Thin SVD by one-sided (Hestenes) Jacobi rotations, and the SVD-based
//! Moore-Penrose pseudoinverse.

use super::matrix::{require_finite, DenseMatrix};
use crate::error::{contract, Error, Result};

const MAX_SWEEPS: usize = 80;
const ORTHO_TOL: f64 = 1e-15;

/// `m = u * diag(s) * vt` with `u` m x p, `vt` p x n, p = min(m, n).
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub vt: DenseMatrix,
}

impl Svd {
    pub fn reconstruct(&self) -> DenseMatrix {
        let p = self.s.len();
        let us = DenseMatrix::from_fn(self.u.rows(), p, |i, j| self.u[(i, j)] * self.s[j]);
        us.matmul(&self.vt).expect("svd factors conform")
    }
}

pub fn svd(m: &DenseMatrix) -> Result<Svd> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(contract(format!(
            "svd of an empty {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    require_finite(m, "svd")?;
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn jacobi_tall(a: &DenseMatrix) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n == 1;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "jacobi svd of a {m}x{n} matrix did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vt = DenseMatrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > f64::MIN_POSITIVE * 1e3 {
            u_cols.push(Some(cols[j].iter().map(|x| x / sigma).collect()));
        } else {
            u_cols.push(None);
        }
        for i in 0..n {
            vt[(k, i)] = v[j][i];
        }
    }
    let u_cols = complete_basis(m, u_cols);
    let u = DenseMatrix::from_fn(m, n, |i, j| u_cols[j][i]);
    Ok(Svd { u, s, vt })
}

fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (ax, by) = (*x, *y);
        *x = c * ax - s * by;
        *y = s * ax + c * by;
    }
}

/// Fill columns belonging to zero singular values with unit vectors
/// orthogonal to everything already present.
fn complete_basis(m: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0usize;
    cols.into_iter()
        .map(|c| match c {
            Some(c) => c,
            None => loop {
                let mut e = vec![0.0; m];
                e[candidate % m] = 1.0;
                candidate += 1;
                for _ in 0..2 {
                    for d in &done {
                        let proj = dot(&e, d);
                        e.iter_mut().zip(d).for_each(|(x, y)| *x -= proj * y);
                    }
                }
                let norm = dot(&e, &e).sqrt();
                if norm > 0.5 {
                    e.iter_mut().for_each(|x| *x /= norm);
                    done.push(e.clone());
                    break e;
                }
            },
        })
        .collect()
}

/// Moore-Penrose pseudoinverse; singular values at or below `rcond * max(s)`
/// are treated as zero.
pub fn pinv(m: &DenseMatrix, rcond: f64) -> Result<DenseMatrix> {
    if !(rcond > 0.0) {
        return Err(contract(format!(
            "pinv: rcond must be positive, got {rcond}"
        )));
    }
    let Svd { u, s, vt } = svd(m)?;
    let cutoff = rcond * s.first().copied().unwrap_or(0.0);
    let p = s.len();
    let inv: Vec<f64> = s
        .iter()
        .map(|&x| if x > cutoff && x > 0.0 { 1.0 / x } else { 0.0 })
        .collect();
    // V * diag(inv) * U^T
    Ok(DenseMatrix::from_fn(m.cols(), m.rows(), |i, j| {
        (0..p).map(|k| vt[(k, i)] * inv[k] * u[(j, k)]).sum()
    }))
}
