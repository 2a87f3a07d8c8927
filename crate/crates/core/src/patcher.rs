//! Non-overlapping temporal patches of the decomposed signals and the
//! patch-wise convolution that turns each patch into one token.
//!
//! The patch count is `ceil(T / T_P)`; a short final patch is right-padded
//! by repeating the last time step, so patches always tile the window.

use crate::compute::{Tape, Tensor, Var};
use crate::error::{contract, shape_mismatch, Result};

pub const PATCH_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    /// [N, P, T_P, C + 1]
    pub values: Tensor,
    /// Number of repeated steps at the end of the last patch.
    pub padded: usize,
}

impl PatchTensor {
    pub fn nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn patches(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn patch_len(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[3]
    }

    /// Convolution layout [N * P, C + 1, T_P].
    pub fn conv_input(&self) -> Tensor {
        let (n, p, tp, c) = (
            self.nodes(),
            self.patches(),
            self.patch_len(),
            self.channels(),
        );
        let src = self.values.data();
        Tensor::from_fn(&[n * p, c, tp], |i| {
            let (np, rest) = (i / (c * tp), i % (c * tp));
            let (ch, s) = (rest / tp, rest % tp);
            src[(np * tp + s) * c + ch]
        })
    }
}

pub fn patch_count(t: usize, patch_len: usize) -> usize {
    t.div_ceil(patch_len)
}

/// Split `x_dec` [N, T, C + 1] into patches of `patch_len` steps.
pub fn make_patches(x_dec: &Tensor, patch_len: usize) -> Result<PatchTensor> {
    if x_dec.rank() != 3 {
        return Err(contract(format!(
            "make_patches needs [N, T, C], got {:?}",
            x_dec.shape()
        )));
    }
    let (n, t, c) = (x_dec.shape()[0], x_dec.shape()[1], x_dec.shape()[2]);
    if patch_len == 0 || patch_len > t {
        return Err(contract(format!(
            "patch length must lie in 1..={t}, got {patch_len}"
        )));
    }
    let p = patch_count(t, patch_len);
    let src = x_dec.data();
    let values = Tensor::from_fn(&[n, p, patch_len, c], |i| {
        let ch = i % c;
        let s = (i / c) % patch_len;
        let pi = (i / (c * patch_len)) % p;
        let node = i / (c * patch_len * p);
        let time = (pi * patch_len + s).min(t - 1);
        src[(node * t + time) * c + ch]
    });
    Ok(PatchTensor {
        values,
        padded: p * patch_len - t,
    })
}

/// Conv1d (kernel 3, same padding) along each patch, then mean over the
/// patch's time axis: `input` [N * P, C + 1, T_P] -> tokens [N * P, D].
pub fn encode_patches(tape: &mut Tape, input: Var, w: Var, b: Var) -> Result<Var> {
    let (si, sw) = (tape.shape(input).to_vec(), tape.shape(w).to_vec());
    if si.len() != 3 || sw.len() != 3 || si[1] != sw[1] {
        return Err(shape_mismatch("encode_patches", &si, &sw));
    }
    let conv = tape.conv1d(input, w, b)?;
    tape.mean_pool(conv, 2)
}
