//! Exact DMD over a normalized window.
//!
//! Modes evolve with discrete eigenvalues (`lambda^t`, unit time step)
//! rather than continuous exponents, which sidesteps logarithms of zero or
//! negative eigenvalues. Modes are the projected ones, `Phi = U_r W`, and
//! amplitudes are fit to the first snapshot. Optional TLS projection and
//! variable-projection refinement trade that fidelity for noise robustness.
//!
//! Mode energy is `|eps|^2 * ||Phi_c||^2 * sum_t |lambda|^(2t)`: initial
//! amplitude combined with how the eigenvalue magnitude sustains it over the
//! window. A conjugate pair scores the sum of both members.

use num_complex::Complex64;

use crate::compute::{eig, pinv, svd, ComplexMatrix, ComplexVector, DenseMatrix, Tensor};
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecomposeConfig {
    pub rank_cap: usize,
    pub sv_tol: f64,
    pub top_k: usize,
    pub max_components: usize,
    /// Total-least-squares projection before the operator fit.
    pub tls: bool,
    /// Refine eigenvalues and amplitudes against every snapshot.
    pub refine: bool,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            rank_cap: 16,
            sv_tol: 1e-10,
            top_k: 3,
            max_components: 8,
            tls: false,
            refine: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmdStatus {
    Ok,
    /// Zero-rank window: no modes, all outputs zero.
    Degenerate,
}

/// Where a real component comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Merge {
    Real(usize),
    /// Conjugate pair; the first index carries the positive imaginary part.
    Pair(usize, usize),
}

impl Merge {
    fn lead(self) -> usize {
        match self {
            Merge::Real(i) | Merge::Pair(i, _) => i,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModeSet {
    pub rank: usize,
    pub lambdas: ComplexVector,
    pub modes: ComplexMatrix,
    pub amplitudes: ComplexVector,
    pub merge_map: Vec<Merge>,
    /// One score per merged component, aligned with `merge_map`.
    pub energies: Vec<f64>,
    pub status: DmdStatus,
}

impl ModeSet {
    pub fn component_count(&self) -> usize {
        self.merge_map.len()
    }

    fn degenerate(n: usize) -> Self {
        Self {
            rank: 0,
            lambdas: Vec::new(),
            modes: ComplexMatrix::zeros(n, 0),
            amplitudes: Vec::new(),
            merge_map: Vec::new(),
            energies: Vec::new(),
            status: DmdStatus::Degenerate,
        }
    }

    /// Component indices by descending energy (ties keep eigen order).
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.energies.len()).collect();
        order.sort_by(|&a, &b| {
            self.energies[b]
                .total_cmp(&self.energies[a])
                .then(a.cmp(&b))
        });
        order
    }

    /// Text table: component, |lambda|, arg lambda, energy share.
    pub fn summary(&self) -> String {
        let total: f64 = self.energies.iter().sum();
        let mut out = format!(
            "rank {} components {} status {:?}\n{:>9} {:>12} {:>12} {:>12}\n",
            self.rank,
            self.component_count(),
            self.status,
            "component",
            "|lambda|",
            "arg_lambda",
            "energy_share"
        );
        for c in self.ranking() {
            let l = self.lambdas[self.merge_map[c].lead()];
            let share = if total > 0.0 {
                self.energies[c] / total
            } else {
                0.0
            };
            out.push_str(&format!(
                "{c:>9} {:>12.6} {:>12.6} {share:>12.6}\n",
                l.norm(),
                l.arg()
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    /// [N, T, C] component signals, sorted by descending energy.
    pub x_dyn: Tensor,
    pub x_rec: DenseMatrix,
    /// [N, T, C_max + 1]: channel 0 is `x_rec`, then the components,
    /// zero-padded (or truncated) to `C_max`.
    pub x_dec: Tensor,
    pub modeset: ModeSet,
    /// Largest imaginary part left after merging, relative to
    /// `max(1, max |value|)`.
    pub imag_residue: f64,
    pub warnings: Vec<String>,
}

pub fn fit_dmd(x: &DenseMatrix, rank_cap: usize, sv_tol: f64) -> Result<ModeSet> {
    fit_dmd_with(x, rank_cap, sv_tol, false, false)
}

/// `tls` projects both snapshot matrices onto the leading right singular
/// subspace of the stacked `[X1; X2]` before the fit (total least squares),
/// which removes the eigenvalue damping that noise induces in plain DMD.
/// `refine` then re-fits eigenvalues and amplitudes to all snapshots by
/// variable projection (Levenberg-Marquardt on the eigenvalues, linear
/// least squares for the spatial coefficients).
pub fn fit_dmd_with(
    x: &DenseMatrix,
    rank_cap: usize,
    sv_tol: f64,
    tls: bool,
    refine: bool,
) -> Result<ModeSet> {
    let (n, t) = (x.rows(), x.cols());
    if t < 3 || rank_cap == 0 || !(sv_tol >= 0.0) {
        return Err(contract(format!(
            "fit_dmd needs T >= 3, rank_cap >= 1, sv_tol >= 0 (got T={t}, rank_cap={rank_cap}, sv_tol={sv_tol})"
        )));
    }
    let mut x1 = x.columns(0, t - 1);
    let mut x2 = x.columns(1, t);
    if x1.frobenius_norm() == 0.0 {
        return Ok(ModeSet::degenerate(n));
    }
    if tls {
        let stacked = DenseMatrix::from_fn(2 * n, t - 1, |i, j| {
            if i < n {
                x1[(i, j)]
            } else {
                x2[(i - n, j)]
            }
        });
        let z = svd(&stacked)?;
        let q =
            z.s.iter()
                .filter(|&&s| s > sv_tol * z.s[0])
                .count()
                .min(rank_cap);
        let vq = z.vt.transpose().columns(0, q);
        let proj = vq.matmul(&vq.transpose())?;
        x1 = x1.matmul(&proj)?;
        x2 = x2.matmul(&proj)?;
    }
    let dec = svd(&x1)?;
    let s0 = dec.s[0];
    let r = dec
        .s
        .iter()
        .filter(|&&s| s > sv_tol * s0)
        .count()
        .min(rank_cap);
    if r == 0 {
        return Ok(ModeSet::degenerate(n));
    }
    let ur = dec.u.columns(0, r);
    // V_r Sigma_r^-1 as a (T-1) x r matrix
    let v_sinv = DenseMatrix::from_fn(t - 1, r, |i, j| dec.vt[(j, i)] / dec.s[j]);
    let a_tilde = ur.transpose().matmul(&x2)?.matmul(&v_sinv)?;
    let e = eig(&a_tilde)?;
    let modes = ur.to_complex().matmul(&e.vectors)?;
    let amplitudes = fit_amplitudes(&modes, &x1.column(0))?;

    let mut merge_map = Vec::new();
    let mut c = 0;
    while c < r {
        if e.values[c].im != 0.0 && c + 1 < r {
            merge_map.push(Merge::Pair(c, c + 1));
            c += 2;
        } else {
            merge_map.push(Merge::Real(c));
            c += 1;
        }
    }
    let mut ms = ModeSet {
        rank: r,
        lambdas: e.values,
        modes,
        amplitudes,
        merge_map,
        energies: Vec::new(),
        status: DmdStatus::Ok,
    };
    if refine {
        refine_modes(&mut ms, x)?;
    }
    ms.energies = mode_energy(&ms, t);
    Ok(ms)
}

/// Real temporal basis for the merged components: a pair (rho, theta)
/// gives `rho^t cos(theta t)` and `rho^t sin(theta t)`, a real mode `l^t`.
fn temporal_basis(groups: &[Merge], p: &[f64], t: usize) -> DenseMatrix {
    let cols: usize = groups
        .iter()
        .map(|g| if matches!(g, Merge::Pair(..)) { 2 } else { 1 })
        .sum();
    let mut b = DenseMatrix::zeros(t, cols);
    let (mut pi, mut ci) = (0, 0);
    for g in groups {
        match g {
            Merge::Pair(..) => {
                let (rho, th) = (p[pi], p[pi + 1]);
                for s in 0..t {
                    let m = rho.powi(s as i32);
                    b[(s, ci)] = m * (th * s as f64).cos();
                    b[(s, ci + 1)] = m * (th * s as f64).sin();
                }
                pi += 2;
                ci += 2;
            }
            Merge::Real(_) => {
                for s in 0..t {
                    b[(s, ci)] = p[pi].powi(s as i32);
                }
                pi += 1;
                ci += 1;
            }
        }
    }
    b
}

fn vp_residual(groups: &[Merge], p: &[f64], xt: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    let b = temporal_basis(groups, p, xt.rows());
    let coef = pinv(&b, 1e-12)?.matmul(xt)?;
    let r = xt.sub(&b.matmul(&coef)?)?;
    Ok((r.data().to_vec(), coef))
}

/// Variable-projection refinement of the eigenvalues against all snapshots.
fn refine_modes(ms: &mut ModeSet, x: &DenseMatrix) -> Result<()> {
    let xt = x.transpose();
    let groups = ms.merge_map.clone();
    let mut p = Vec::new();
    for g in &groups {
        let l = ms.lambdas[g.lead()];
        match g {
            Merge::Pair(..) => {
                p.push(l.norm());
                p.push(l.arg());
            }
            Merge::Real(_) => p.push(l.re),
        }
    }
    let (mut res, _) = vp_residual(&groups, &p, &xt)?;
    let mut cost: f64 = res.iter().map(|v| v * v).sum();
    let mut mu = 1e-3;
    for _ in 0..100 {
        let h = 1e-7;
        let np = p.len();
        let m = res.len();
        let mut jac = DenseMatrix::zeros(m, np);
        for k in 0..np {
            let mut pp = p.clone();
            pp[k] += h;
            let (rp, _) = vp_residual(&groups, &pp, &xt)?;
            pp[k] -= 2.0 * h;
            let (rm, _) = vp_residual(&groups, &pp, &xt)?;
            for i in 0..m {
                jac[(i, k)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let jtj = jac.transpose().matmul(&jac)?;
        let jtr = jac.transpose().matvec(&res)?;
        let mut improved = false;
        for _ in 0..10 {
            let a = DenseMatrix::from_fn(np, np, |i, j| {
                jtj[(i, j)]
                    + if i == j {
                        mu * (1.0 + jtj[(i, i)])
                    } else {
                        0.0
                    }
            });
            let step = pinv(&a, 1e-14)?.matvec(&jtr)?;
            let cand: Vec<f64> = p.iter().zip(&step).map(|(a, b)| a - b).collect();
            let (rc, _) = vp_residual(&groups, &cand, &xt)?;
            let cc: f64 = rc.iter().map(|v| v * v).sum();
            if cc.is_finite() && cc < cost {
                p = cand;
                res = rc;
                let rel = (cost - cc) / cost.max(1e-300);
                cost = cc;
                mu = (mu * 0.3).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let (_, coef) = vp_residual(&groups, &p, &xt)?;
    let n = x.rows();
    let (mut pi, mut ci) = (0, 0);
    for g in &groups {
        match *g {
            Merge::Pair(i, j) => {
                let (rho, mut th) = (p[pi], p[pi + 1]);
                let sign = if th < 0.0 { -1.0 } else { 1.0 };
                th *= sign;
                let v: Vec<Complex64> = (0..n)
                    .map(|k| Complex64::new(coef[(ci, k)], -sign * coef[(ci + 1, k)]))
                    .collect();
                let norm = v
                    .iter()
                    .map(|z| z.norm_sqr())
                    .sum::<f64>()
                    .sqrt()
                    .max(1e-300);
                let lam = Complex64::from_polar(rho, th);
                ms.lambdas[i] = lam;
                ms.lambdas[j] = lam.conj();
                ms.amplitudes[i] = Complex64::new(norm / 2.0, 0.0);
                ms.amplitudes[j] = Complex64::new(norm / 2.0, 0.0);
                for (k, vk) in v.iter().enumerate().take(n) {
                    ms.modes[(k, i)] = vk / norm;
                    ms.modes[(k, j)] = (vk / norm).conj();
                }
                pi += 2;
                ci += 2;
            }
            Merge::Real(i) => {
                let norm = (0..n)
                    .map(|k| coef[(ci, k)].powi(2))
                    .sum::<f64>()
                    .sqrt()
                    .max(1e-300);
                ms.lambdas[i] = Complex64::new(p[pi], 0.0);
                ms.amplitudes[i] = Complex64::new(norm, 0.0);
                for k in 0..n {
                    ms.modes[(k, i)] = Complex64::new(coef[(ci, k)] / norm, 0.0);
                }
                pi += 1;
                ci += 1;
            }
        }
    }
    Ok(())
}

/// Least-squares `Phi eps = x1` through the real embedding of `Phi`.
fn fit_amplitudes(modes: &ComplexMatrix, x1: &[f64]) -> Result<ComplexVector> {
    let (n, r) = (modes.rows(), modes.cols());
    let emb = modes.real_embedding();
    let mut rhs = x1.to_vec();
    rhs.resize(2 * n, 0.0);
    let sol = pinv(&emb, 1e-12)?.matvec(&rhs)?;
    Ok((0..r).map(|i| Complex64::new(sol[i], sol[r + i])).collect())
}

fn single_energy(ms: &ModeSet, i: usize, t: usize) -> f64 {
    let phi_sq: f64 = (0..ms.modes.rows())
        .map(|n| ms.modes[(n, i)].norm_sqr())
        .sum();
    let mag2 = ms.lambdas[i].norm_sqr();
    let mut power = 0.0;
    let mut p = 1.0;
    for _ in 0..t {
        power += p;
        p *= mag2;
    }
    ms.amplitudes[i].norm_sqr() * phi_sq * power
}

pub fn mode_energy(ms: &ModeSet, t: usize) -> Vec<f64> {
    ms.merge_map
        .iter()
        .map(|m| match *m {
            Merge::Real(i) => single_energy(ms, i, t),
            Merge::Pair(i, j) => single_energy(ms, i, t) + single_energy(ms, j, t),
        })
        .collect()
}

/// Complex contribution `eps_i lambda_i^t Phi[n, i]` as an N x T grid.
fn contribution(ms: &ModeSet, i: usize, t: usize) -> Vec<Complex64> {
    let n = ms.modes.rows();
    let mut out = vec![Complex64::new(0.0, 0.0); n * t];
    let mut pow = Complex64::new(1.0, 0.0);
    for step in 0..t {
        let coeff = ms.amplitudes[i] * pow;
        for node in 0..n {
            out[node * t + step] = coeff * ms.modes[(node, i)];
        }
        pow *= ms.lambdas[i];
    }
    out
}

/// [N, T, C] real component signals in merge order.
pub fn component_signals(ms: &ModeSet, t: usize) -> Tensor {
    let n = ms.modes.rows();
    let c_count = ms.component_count();
    let mut out = Tensor::zeros(&[n, t, c_count]);
    for (c, m) in ms.merge_map.iter().enumerate() {
        let (lead, factor) = match *m {
            Merge::Real(i) => (i, 1.0),
            Merge::Pair(i, _) => (i, 2.0),
        };
        let contrib = contribution(ms, lead, t);
        let d = out.data_mut();
        for node in 0..n {
            for step in 0..t {
                d[(node * t + step) * c_count + c] = factor * contrib[node * t + step].re;
            }
        }
    }
    out
}

/// Largest imaginary magnitude of the summed complex contributions,
/// relative to `max(1, max |value|)`.
fn imag_residue(ms: &ModeSet, t: usize) -> f64 {
    let n = ms.modes.rows();
    let mut total = vec![Complex64::new(0.0, 0.0); n * t];
    for i in 0..ms.rank {
        for (acc, v) in total.iter_mut().zip(contribution(ms, i, t)) {
            *acc += v;
        }
    }
    let max_im = total.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let max_abs = total.iter().map(|z| z.norm()).fold(1.0, f64::max);
    max_im / max_abs
}

/// Sum of the `k` highest-energy components; `k` above the component
/// count is clamped and reported in the returned warning.
pub fn reconstruct_topk(ms: &ModeSet, t: usize, k: usize) -> (DenseMatrix, Option<String>) {
    let n = ms.modes.rows();
    let c_count = ms.component_count();
    let warning = (k > c_count)
        .then(|| format!("top_k {k} exceeds the {c_count} available components; using {c_count}"));
    let signals = component_signals(ms, t);
    let chosen: Vec<usize> = ms.ranking().into_iter().take(k.min(c_count)).collect();
    let d = signals.data();
    let rec = DenseMatrix::from_fn(n, t, |node, step| {
        chosen
            .iter()
            .map(|&c| d[(node * t + step) * c_count + c])
            .sum()
    });
    (rec, warning)
}

pub fn decompose(x_norm: &DenseMatrix, cfg: &DecomposeConfig) -> Result<Decomposition> {
    let (n, t) = (x_norm.rows(), x_norm.cols());
    let ms = fit_dmd_with(x_norm, cfg.rank_cap, cfg.sv_tol, cfg.tls, cfg.refine)?;
    let cmax = cfg.max_components;
    let mut warnings = Vec::new();
    if ms.status == DmdStatus::Degenerate {
        warnings.push("degenerate window: rank 0, decomposition is all zeros".to_string());
        return Ok(Decomposition {
            x_dyn: Tensor::zeros(&[n, t, 0]),
            x_rec: DenseMatrix::zeros(n, t),
            x_dec: Tensor::zeros(&[n, t, cmax + 1]),
            modeset: ms,
            imag_residue: 0.0,
            warnings,
        });
    }
    let c_count = ms.component_count();
    let (x_rec, warn) = reconstruct_topk(&ms, t, cfg.top_k);
    warnings.extend(warn);
    if c_count > cmax {
        warnings.push(format!(
            "{c_count} components exceed max_components {cmax}; lowest-energy ones dropped from x_dec"
        ));
    }
    let raw = component_signals(&ms, t);
    let order = ms.ranking();
    let mut x_dyn = Tensor::zeros(&[n, t, c_count]);
    let mut x_dec = Tensor::zeros(&[n, t, cmax + 1]);
    {
        let (src, dyn_d) = (raw.data(), x_dyn.data_mut());
        for cell in 0..n * t {
            for (slot, &c) in order.iter().enumerate() {
                dyn_d[cell * c_count + slot] = src[cell * c_count + c];
            }
        }
    }
    {
        let (dyn_d, dec) = (x_dyn.data(), x_dec.data_mut());
        for cell in 0..n * t {
            dec[cell * (cmax + 1)] = x_rec.data()[cell];
            for slot in 0..c_count.min(cmax) {
                dec[cell * (cmax + 1) + 1 + slot] = dyn_d[cell * c_count + slot];
            }
        }
    }
    let imag_residue = imag_residue(&ms, t);
    if imag_residue > 1e-9 {
        warnings.push(format!(
            "imaginary residue {imag_residue:.3e} after merging"
        ));
    }
    Ok(Decomposition {
        x_dyn,
        x_rec,
        x_dec,
        modeset: ms,
        imag_residue,
        warnings,
    })
}

/// Ablation input: the raw window repeated across all `C_max + 1` channels.
pub fn broadcast_raw(x_norm: &DenseMatrix, max_components: usize) -> Tensor {
    let (n, t) = (x_norm.rows(), x_norm.cols());
    let ch = max_components + 1;
    Tensor::from_fn(&[n, t, ch], |i| x_norm.data()[i / ch])
}
