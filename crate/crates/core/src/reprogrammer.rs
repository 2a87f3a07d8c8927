//! Selective vocabulary reprogramming.
//!
//! Word scores `m = softmax(E W)` rank the frozen embedding rows. During
//! training the scores are perturbed with Gumbel noise and relaxed at
//! temperature `tau_g`; the top-K rows form the sub-vocabulary `E'`. Each
//! selected row is multiplied by a straight-through weight that is exactly
//! one in the forward pass and routes gradient to `m'` in the backward pass,
//! so `W` learns while `E` stays untouched. Patch tokens then attend over
//! `E'` with a single head.

use rand::Rng;

use crate::compute::{Tape, Tensor, Var};
use crate::error::{contract, shape_mismatch, Result};

/// Floor applied to word scores before the logarithm.
pub const SCORE_FLOOR: f64 = 1e-12;

/// `softmax(E W)` over the V vocabulary rows: `e` [V, d], `w` [d, 1].
pub fn word_scores(tape: &mut Tape, e: Var, w: Var) -> Result<Var> {
    let logits = tape.matmul(e, w)?;
    let v = tape.shape(logits)[0];
    let flat = tape.reshape(logits, &[v])?;
    tape.softmax(flat, 0)
}

/// Standard Gumbel draws `-ln(-ln u)` with `u` uniform on the open interval.
pub fn gumbel_noise<R: Rng>(rng: &mut R, len: usize) -> Tensor {
    Tensor::from_fn(&[len], |_| {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    })
}

/// `m'_i = softmax_i((ln m_i + g_i) / tau_g)`.
pub fn gumbel_relax(tape: &mut Tape, m: Var, noise: &Tensor, tau_g: f64) -> Result<Var> {
    if !(tau_g > 0.0) {
        return Err(contract(format!("gumbel temperature must be positive, got {tau_g}")));
    }
    if tape.shape(m) != noise.shape() {
        return Err(shape_mismatch("gumbel_relax", tape.shape(m), noise.shape()));
    }
    let logm = tape.log_floor(m, SCORE_FLOOR);
    let g = tape.constant(noise.clone());
    let perturbed = tape.add(logm, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau_g);
    tape.softmax(scaled, 0)
}

/// Indices of the `k` largest scores, largest first; ties go to the lower
/// index.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(contract(format!(
            "top-K needs 1 <= K <= V, got K={k}, V={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// The (relaxed) score vector the selection was drawn from.
    pub weights: Vec<f64>,
}

/// Pick the top-K rows of `e` by `scores` [V] and weight them with the
/// straight-through estimator; returns the selection and `E'` [K, d].
pub fn sample_words(tape: &mut Tape, e: Var, scores: Var, k: usize) -> Result<(Selection, Var)> {
    let weights = tape.value(scores).data().to_vec();
    let indices = select_topk(&weights, k)?;
    let rows = tape.index_select(e, &indices)?;
    let picked = tape.index_select(scores, &indices)?;
    let gate = tape.straight_through(picked);
    let e_sel = tape.scale_rows(rows, gate)?;
    Ok((Selection { indices, weights }, e_sel))
}

/// Keys and values of the sub-vocabulary: `E' W_k`, `E' W_v`.
pub fn keys_values(tape: &mut Tape, e_sel: Var, wk: Var, wv: Var) -> Result<(Var, Var)> {
    Ok((tape.matmul(e_sel, wk)?, tape.matmul(e_sel, wv)?))
}

/// Single-head scaled dot-product attention of `tokens` [M, D] over the
/// sub-vocabulary keys/values [K, d]; returns `Z` [M, d].
pub fn cross_attend(tape: &mut Tape, tokens: Var, wq: Var, keys: Var, values: Var) -> Result<Var> {
    let q = tape.matmul(tokens, wq)?;
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(keys).to_vec());
    if sq[1] != sk[1] {
        return Err(shape_mismatch("cross_attend", &sq, &sk));
    }
    let kt = tape.transpose(keys)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, 1.0 / (sq[1] as f64).sqrt());
    let attn = tape.softmax(scores, 1)?;
    tape.matmul(attn, values)
}
