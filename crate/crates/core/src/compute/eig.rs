//! Nonsymmetric real eigensolver: Householder reduction to upper Hessenberg
//! form followed by the Francis double-shift QR iteration with eigenvector
//! back-substitution (the classic EISPACK hqr2 scheme).

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use super::matrix::{complex_norm, require_finite, ComplexMatrix, ComplexVector, DenseMatrix};
use crate::error::{contract, Error, Result};

/// Eigenvalues and unit-norm eigenvectors (as columns). Complex eigenvalues
/// come in adjacent conjugate pairs, positive imaginary part first.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: ComplexVector,
    pub vectors: ComplexMatrix,
}

/// Square scratch matrix indexed by signed coordinates, which keeps the
/// descending loops of the QR sweep readable.
struct Sq {
    n: usize,
    d: Vec<f64>,
}

impl Index<(isize, isize)> for Sq {
    type Output = f64;
    fn index(&self, (i, j): (isize, isize)) -> &f64 {
        &self.d[i as usize * self.n + j as usize]
    }
}

impl IndexMut<(isize, isize)> for Sq {
    fn index_mut(&mut self, (i, j): (isize, isize)) -> &mut f64 {
        &mut self.d[i as usize * self.n + j as usize]
    }
}

pub fn eig(m: &DenseMatrix) -> Result<Eigen> {
    if !m.is_square() || m.rows() == 0 {
        return Err(contract(format!(
            "eig needs a non-empty square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    require_finite(m, "eig")?;
    let n = m.rows();
    let mut h = Sq {
        n,
        d: m.data().to_vec(),
    };
    let mut v = Sq {
        n,
        d: vec![0.0; n * n],
    };
    orthes(&mut h, &mut v);
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    hqr2(&mut h, &mut v, &mut re, &mut im)?;

    let values: ComplexVector = re
        .iter()
        .zip(&im)
        .map(|(&a, &b)| Complex64::new(a, b))
        .collect();
    let mut vectors = ComplexMatrix::zeros(n, n);
    let mut j = 0;
    while j < n {
        if im[j] > 0.0 && j + 1 < n {
            for i in 0..n {
                let (a, b) = (v[(i as isize, j as isize)], v[(i as isize, j as isize + 1)]);
                vectors[(i, j)] = Complex64::new(a, b);
                vectors[(i, j + 1)] = Complex64::new(a, -b);
            }
            j += 2;
        } else {
            for i in 0..n {
                vectors[(i, j)] = Complex64::new(v[(i as isize, j as isize)], 0.0);
            }
            j += 1;
        }
    }
    for j in 0..n {
        let norm = complex_norm(&vectors.column(j));
        if norm > 0.0 {
            for i in 0..n {
                vectors[(i, j)] /= norm;
            }
        }
    }
    Ok(Eigen { values, vectors })
}

fn orthes(h: &mut Sq, v: &mut Sq) {
    let n = h.n as isize;
    let (low, high) = (0isize, n - 1);
    let mut ort = vec![0.0; h.n];
    let mut mm = low + 1;
    while mm < high {
        let scale: f64 = (mm..=high).map(|i| h[(i, mm - 1)].abs()).sum();
        if scale != 0.0 {
            let mut hh = 0.0;
            for i in (mm..=high).rev() {
                ort[i as usize] = h[(i, mm - 1)] / scale;
                hh += ort[i as usize] * ort[i as usize];
            }
            let mut g = hh.sqrt();
            if ort[mm as usize] > 0.0 {
                g = -g;
            }
            hh -= ort[mm as usize] * g;
            ort[mm as usize] -= g;
            for j in mm..n {
                let f: f64 = (mm..=high)
                    .rev()
                    .map(|i| ort[i as usize] * h[(i, j)])
                    .sum::<f64>()
                    / hh;
                for i in mm..=high {
                    h[(i, j)] -= f * ort[i as usize];
                }
            }
            for i in 0..=high {
                let f: f64 = (mm..=high)
                    .rev()
                    .map(|j| ort[j as usize] * h[(i, j)])
                    .sum::<f64>()
                    / hh;
                for j in mm..=high {
                    h[(i, j)] -= f * ort[j as usize];
                }
            }
            ort[mm as usize] *= scale;
            h[(mm, mm - 1)] = scale * g;
        }
        mm += 1;
    }

    for i in 0..n {
        for j in 0..n {
            v[(i, j)] = if i == j { 1.0 } else { 0.0 };
        }
    }
    let mut mm = high - 1;
    while mm > low {
        if h[(mm, mm - 1)] != 0.0 {
            for i in mm + 1..=high {
                ort[i as usize] = h[(i, mm - 1)];
            }
            for j in mm..=high {
                let mut g: f64 = (mm..=high).map(|i| ort[i as usize] * v[(i, j)]).sum();
                // two divisions avoid underflow
                g = (g / ort[mm as usize]) / h[(mm, mm - 1)];
                for i in mm..=high {
                    v[(i, j)] += g * ort[i as usize];
                }
            }
        }
        mm -= 1;
    }
}

fn cdiv(xr: f64, xi: f64, yr: f64, yi: f64) -> (f64, f64) {
    let q = Complex64::new(xr, xi) / Complex64::new(yr, yi);
    (q.re, q.im)
}

#[allow(clippy::many_single_char_names)]
fn hqr2(h: &mut Sq, v: &mut Sq, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let nn = h.n as isize;
    let mut n = nn - 1;
    let (low, high) = (0isize, nn - 1);
    let eps = f64::EPSILON;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut t, mut w, mut x, mut y);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in (i - 1).max(0)..nn {
            norm += h[(i, j)].abs();
        }
    }

    let budget = 100 * h.n.max(1);
    let mut total_iter = 0usize;
    let mut iter = 0;
    while n >= low {
        let mut l = n;
        while l > low {
            s = h[(l - 1, l - 1)].abs() + h[(l, l)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(l, l - 1)] == 0.0 || h[(l, l - 1)].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            // one root
            h[(n, n)] += exshift;
            d[n as usize] = h[(n, n)];
            e[n as usize] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            // two roots
            w = h[(n, n - 1)] * h[(n - 1, n)];
            p = (h[(n - 1, n - 1)] - h[(n, n)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[(n, n)] += exshift;
            h[(n - 1, n - 1)] += exshift;
            x = h[(n, n)];
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                d[n as usize - 1] = x + z;
                d[n as usize] = d[n as usize - 1];
                if z != 0.0 {
                    d[n as usize] = x - w / z;
                }
                e[n as usize - 1] = 0.0;
                e[n as usize] = 0.0;
                x = h[(n, n - 1)];
                s = x.abs() + z.abs();
                p = x / s;
                q = z / s;
                r = (p * p + q * q).sqrt();
                p /= r;
                q /= r;
                for j in n - 1..nn {
                    z = h[(n - 1, j)];
                    h[(n - 1, j)] = q * z + p * h[(n, j)];
                    h[(n, j)] = q * h[(n, j)] - p * z;
                }
                for i in 0..=n {
                    z = h[(i, n - 1)];
                    h[(i, n - 1)] = q * z + p * h[(i, n)];
                    h[(i, n)] = q * h[(i, n)] - p * z;
                }
                for i in low..=high {
                    z = v[(i, n - 1)];
                    v[(i, n - 1)] = q * z + p * v[(i, n)];
                    v[(i, n)] = q * v[(i, n)] - p * z;
                }
            } else {
                d[n as usize - 1] = x + p;
                d[n as usize] = x + p;
                e[n as usize - 1] = z;
                e[n as usize] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            total_iter += 1;
            if total_iter > budget {
                return Err(Error::Numerical(format!(
                    "eigenvalue QR iteration did not converge within {budget} sweeps"
                )));
            }
            x = h[(n, n)];
            y = 0.0;
            w = 0.0;
            if l < n {
                y = h[(n - 1, n - 1)];
                w = h[(n, n - 1)] * h[(n - 1, n)];
            }
            // exceptional shifts
            if iter == 10 {
                exshift += x;
                for i in low..=n {
                    h[(i, i)] -= x;
                }
                s = h[(n, n - 1)].abs() + h[(n - 1, n - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=n {
                        h[(i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;

            let mut m = n - 2;
            while m >= l {
                z = h[(m, m)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[(m + 1, m)] + h[(m, m + 1)];
                q = h[(m + 1, m + 1)] - z - r - s;
                r = h[(m + 2, m + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[(m, m - 1)].abs() * (q.abs() + r.abs())
                    < eps
                        * (p.abs() * (h[(m - 1, m - 1)].abs() + z.abs() + h[(m + 1, m + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }

            for i in m + 2..=n {
                h[(i, i - 2)] = 0.0;
                if i > m + 2 {
                    h[(i, i - 3)] = 0.0;
                }
            }

            let mut k = m;
            while k < n {
                let notlast = k != n - 1;
                if k != m {
                    p = h[(k, k - 1)];
                    q = h[(k + 1, k - 1)];
                    r = if notlast { h[(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[(k, k - 1)] = -s * x;
                    } else if l != m {
                        h[(k, k - 1)] = -h[(k, k - 1)];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;

                    for j in k..nn {
                        p = h[(k, j)] + q * h[(k + 1, j)];
                        if notlast {
                            p += r * h[(k + 2, j)];
                            h[(k + 2, j)] -= p * z;
                        }
                        h[(k, j)] -= p * x;
                        h[(k + 1, j)] -= p * y;
                    }
                    for i in 0..=n.min(k + 3) {
                        p = x * h[(i, k)] + y * h[(i, k + 1)];
                        if notlast {
                            p += z * h[(i, k + 2)];
                            h[(i, k + 2)] -= p * r;
                        }
                        h[(i, k)] -= p;
                        h[(i, k + 1)] -= p * q;
                    }
                    for i in low..=high {
                        p = x * v[(i, k)] + y * v[(i, k + 1)];
                        if notlast {
                            p += z * v[(i, k + 2)];
                            v[(i, k + 2)] -= p * r;
                        }
                        v[(i, k)] -= p;
                        v[(i, k + 1)] -= p * q;
                    }
                }
                k += 1;
            }
        }
    }

    if norm == 0.0 {
        return Ok(());
    }

    // back-substitute for eigenvectors of the quasi-triangular form
    n = nn - 1;
    while n >= 0 {
        p = d[n as usize];
        q = e[n as usize];
        if q == 0.0 {
            let mut l = n;
            h[(n, n)] = 1.0;
            let mut i = n - 1;
            while i >= 0 {
                w = h[(i, i)] - p;
                r = (l..=n).map(|j| h[(i, j)] * h[(j, n)]).sum();
                if e[i as usize] < 0.0 {
                    z = w;
                    s = r;
                } else {
                    l = i;
                    if e[i as usize] == 0.0 {
                        h[(i, n)] = if w != 0.0 { -r / w } else { -r / (eps * norm) };
                    } else {
                        x = h[(i, i + 1)];
                        y = h[(i + 1, i)];
                        q = (d[i as usize] - p) * (d[i as usize] - p)
                            + e[i as usize] * e[i as usize];
                        t = (x * s - z * r) / q;
                        h[(i, n)] = t;
                        h[(i + 1, n)] = if x.abs() > z.abs() {
                            (-r - w * t) / x
                        } else {
                            (-s - y * t) / z
                        };
                    }
                    t = h[(i, n)].abs();
                    if (eps * t) * t > 1.0 {
                        for j in i..=n {
                            h[(j, n)] /= t;
                        }
                    }
                }
                i -= 1;
            }
        } else if q < 0.0 {
            let mut l = n - 1;
            if h[(n, n - 1)].abs() > h[(n - 1, n)].abs() {
                h[(n - 1, n - 1)] = q / h[(n, n - 1)];
                h[(n - 1, n)] = -(h[(n, n)] - p) / h[(n, n - 1)];
            } else {
                let (cr, ci) = cdiv(0.0, -h[(n - 1, n)], h[(n - 1, n - 1)] - p, q);
                h[(n - 1, n - 1)] = cr;
                h[(n - 1, n)] = ci;
            }
            h[(n, n - 1)] = 0.0;
            h[(n, n)] = 1.0;
            let mut i = n - 2;
            while i >= 0 {
                let mut ra = 0.0;
                let mut sa = 0.0;
                for j in l..=n {
                    ra += h[(i, j)] * h[(j, n - 1)];
                    sa += h[(i, j)] * h[(j, n)];
                }
                w = h[(i, i)] - p;
                if e[i as usize] < 0.0 {
                    z = w;
                    r = ra;
                    s = sa;
                } else {
                    l = i;
                    if e[i as usize] == 0.0 {
                        let (cr, ci) = cdiv(-ra, -sa, w, q);
                        h[(i, n - 1)] = cr;
                        h[(i, n)] = ci;
                    } else {
                        x = h[(i, i + 1)];
                        y = h[(i + 1, i)];
                        let di = d[i as usize] - p;
                        let mut vr = di * di + e[i as usize] * e[i as usize] - q * q;
                        let vi = di * 2.0 * q;
                        if vr == 0.0 && vi == 0.0 {
                            vr = eps * norm * (w.abs() + q.abs() + x.abs() + y.abs() + z.abs());
                        }
                        let (cr, ci) =
                            cdiv(x * r - z * ra + q * sa, x * s - z * sa - q * ra, vr, vi);
                        h[(i, n - 1)] = cr;
                        h[(i, n)] = ci;
                        if x.abs() > z.abs() + q.abs() {
                            h[(i + 1, n - 1)] = (-ra - w * h[(i, n - 1)] + q * h[(i, n)]) / x;
                            h[(i + 1, n)] = (-sa - w * h[(i, n)] - q * h[(i, n - 1)]) / x;
                        } else {
                            let (cr, ci) = cdiv(-r - y * h[(i, n - 1)], -s - y * h[(i, n)], z, q);
                            h[(i + 1, n - 1)] = cr;
                            h[(i + 1, n)] = ci;
                        }
                    }
                    t = h[(i, n - 1)].abs().max(h[(i, n)].abs());
                    if (eps * t) * t > 1.0 {
                        for j in i..=n {
                            h[(j, n - 1)] /= t;
                            h[(j, n)] /= t;
                        }
                    }
                }
                i -= 1;
            }
        }
        n -= 1;
    }

    // back-transform to eigenvectors of the original matrix
    let mut j = nn - 1;
    while j >= low {
        for i in low..=high {
            z = (low..=j.min(high)).map(|k| v[(i, k)] * h[(k, j)]).sum();
            v[(i, j)] = z;
        }
        j -= 1;
    }
    Ok(())
}
