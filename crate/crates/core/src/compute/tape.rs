//! Define-by-run reverse-mode autodiff over a closed set of tensor
//! primitives. A `Tape` borrows parameter tensors instead of copying them;
//! frozen parameters and constants are untracked, so backward never
//! produces a gradient for them.

use std::borrow::Cow;
use std::collections::HashMap;

use indexmap::IndexMap;

use super::tensor::{axis_layout, Tensor};
use crate::error::{contract, shape_mismatch, Error, Result};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Source {
    Internal,
    Constant,
    Param(String),
    Input,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Scale(Var, f64),
    Softmax(Var, usize),
    LayerNorm { x: Var, axis: usize, rstd: Vec<f64> },
    Gelu(Var),
    Conv1d { x: Var, w: Var, b: Var },
    MeanPool(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    IndexSelect(Var, Vec<usize>),
    ScaleRows(Var, Var),
    StraightThrough(Var),
    LogFloor(Var, f64),
    Abs(Var),
    Mean(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    tracked: bool,
    source: Source,
}

/// Gradients of a backward pass: one entry per trainable parameter
/// registered on the tape (zeros if unreached) and one per tracked input.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub params: IndexMap<String, Tensor>,
    pub inputs: HashMap<Var, Tensor>,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Check that `b` matches the trailing dimensions of `a`.
fn trailing(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(shape_mismatch(op, a, b));
    }
    Ok(())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, tracked: bool, source: Source) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            source,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.push(Cow::Owned(value), op, tracked, Source::Internal)
    }

    /// Register a named parameter. Frozen parameters are plain constants.
    pub fn param(&mut self, name: &str, value: &'a Tensor, trainable: bool) -> Var {
        let source = if trainable {
            Source::Param(name.to_string())
        } else {
            Source::Constant
        };
        self.push(Cow::Borrowed(value), Op::Leaf, trainable, source)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false, Source::Constant)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false, Source::Constant)
    }

    /// A tracked leaf whose gradient is reported in `Gradients::inputs`.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true, Source::Input)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.derived(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        op: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.derived(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.derived(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.derived(t, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        trailing("add_bias", self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let w = tb.numel().max(1);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % w])
            .collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.derived(t, Op::AddBias(a, b), &[a, b]))
    }

    /// `a * b` with `b` broadcast over the leading axes of `a`.
    pub fn mul_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        trailing("mul_bias", self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let w = tb.numel().max(1);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tb.data()[i % w])
            .collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.derived(t, Op::MulBias(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.derived(t, Op::Scale(a, s), &[a])
    }

    fn check_axis(&self, op: &str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(contract(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(a)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let ta = self.value(a);
        let (outer, len, inner) = axis_layout(ta.shape(), axis);
        let x = ta.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    y[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    y[at(k)] /= sum;
                }
            }
        }
        let t = Tensor::new(ta.shape(), y)?;
        Ok(self.derived(t, Op::Softmax(a, axis), &[a]))
    }

    /// Normalize to zero mean and unit (population) variance along `axis`;
    /// no affine terms.
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis("layer_norm", a, axis)?;
        let ta = self.value(a);
        let (outer, len, inner) = axis_layout(ta.shape(), axis);
        let x = ta.data();
        let mut y = vec![0.0; x.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let mean = (0..len).map(|k| x[at(k)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|k| (x[at(k)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for k in 0..len {
                    y[at(k)] = (x[at(k)] - mean) * r;
                }
            }
        }
        let t = Tensor::new(ta.shape(), y)?;
        Ok(self.derived(t, Op::LayerNorm { x: a, axis, rstd }, &[a]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.derived(t, Op::Gelu(a), &[a])
    }

    /// 1-D convolution with same padding: x [B, Cin, L], w [Cout, Cin, K],
    /// b [Cout] -> [B, Cout, L].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[1] {
            return Err(shape_mismatch("conv1d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(shape_mismatch("conv1d bias", sw, sb));
        }
        let (bn, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let pad = (k - 1) / 2;
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; bn * cout * l];
        for n in 0..bn {
            for o in 0..cout {
                let row = &mut out[(n * cout + o) * l..(n * cout + o + 1) * l];
                row.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..cin {
                    let xs = &xd[(n * cin + c) * l..(n * cin + c + 1) * l];
                    for kk in 0..k {
                        let wv = wd[(o * cin + c) * k + kk];
                        for (t, r) in row.iter_mut().enumerate() {
                            let src = t + kk;
                            if src >= pad && src - pad < l {
                                *r += wv * xs[src - pad];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[bn, cout, l], out)?;
        Ok(self.derived(t, Op::Conv1d { x, w, b }, &[x, w, b]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_pool", a, axis)?;
        let ta = self.value(a);
        let (outer, len, inner) = axis_layout(ta.shape(), axis);
        let x = ta.data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    y[o * inner + i] += x[o * len * inner + k * inner + i];
                }
            }
        }
        y.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(&shape, y)?;
        Ok(self.derived(t, Op::MeanPool(a, axis), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rest = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(shape_mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_layout(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.derived(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let ta = self.value(a);
        let (outer, alen, inner) = axis_layout(ta.shape(), axis);
        if start + len > alen {
            return Err(contract(format!(
                "slice {start}..{} out of range for axis {axis} of shape {:?}",
                start + len,
                ta.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.derived(t, Op::Slice { x: a, axis, start }, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(contract(format!(
                "transpose needs rank 2, got {:?}",
                ta.shape()
            )));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let t = Tensor::new(&[c, r], transpose_raw(ta.data(), r, c))?;
        Ok(self.derived(t, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.derived(t, Op::Reshape(a), &[a]))
    }

    /// Rows of `a` (axis 0) picked by `indices`.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let rows = *ta
            .shape()
            .first()
            .ok_or_else(|| contract("index_select on a scalar"))?;
        let width = ta.numel() / rows.max(1);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(contract(format!(
                    "index_select: row {i} out of range {rows}"
                )));
            }
            out.extend_from_slice(&ta.data()[i * width..(i + 1) * width]);
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = indices.len();
        let t = Tensor::new(&shape, out)?;
        Ok(self.derived(t, Op::IndexSelect(a, indices.to_vec()), &[a]))
    }

    /// Multiply each row (axis 0) of `a` by the matching entry of `s`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let rows = ta.shape().first().copied().unwrap_or(0);
        if ts.numel() != rows {
            return Err(shape_mismatch("scale_rows", ta.shape(), ts.shape()));
        }
        let width = ta.numel() / rows.max(1);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * ts.data()[i / width])
            .collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.derived(t, Op::ScaleRows(a, s), &[a, s]))
    }

    /// Forward value is all ones; backward passes the gradient through
    /// unchanged.
    pub fn straight_through(&mut self, a: Var) -> Var {
        let t = Tensor::full(self.shape(a), 1.0);
        self.derived(t, Op::StraightThrough(a), &[a])
    }

    /// `ln(max(a, floor))`; zero gradient where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|x| x.max(floor).ln());
        self.derived(t, Op::LogFloor(a, floor), &[a])
    }

    /// Elementwise absolute value with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.derived(t, Op::Abs(a), &[a])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.data().iter().sum::<f64>() / ta.numel().max(1) as f64;
        self.derived(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss), 1.0);
        self.backward_seeded(&[(loss, seed)])
    }

    /// Reverse sweep starting from explicit output gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(shape_mismatch("backward seed", self.shape(*v), g.shape()));
            }
            accumulate(&mut grads, &self.nodes, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at tape node {idx}"
                )));
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.tracked {
                continue;
            }
            match &node.source {
                Source::Param(name) => {
                    let g = grads[idx]
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                    match out.params.get_mut(name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.params.insert(name.clone(), g);
                        }
                    }
                }
                Source::Input => {
                    let g = grads[idx]
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                    out.inputs.insert(Var(idx), g);
                }
                Source::Internal | Source::Constant => {}
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let gd = g.data();
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].tracked;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].tracked {
                accumulate(grads, &self.nodes, v, t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let bt = transpose_raw(val(*b).data(), k, n);
                    send(*a, Tensor::new(sa, matmul_raw(gd, &bt, m, n, k))?);
                }
                if wants(*b) {
                    let at = transpose_raw(val(*a).data(), m, k);
                    send(*b, Tensor::new(sb, matmul_raw(&at, gd, k, m, n))?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    send(*a, Tensor::new(g.shape(), d)?);
                }
                if wants(*b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    send(*b, Tensor::new(g.shape(), d)?);
                }
            }
            Op::AddBias(a, b) => {
                send(*a, g.clone());
                if wants(*b) {
                    let tb = val(*b);
                    let w = tb.numel().max(1);
                    let mut d = vec![0.0; tb.numel()];
                    for (i, x) in gd.iter().enumerate() {
                        d[i % w] += x;
                    }
                    send(*b, Tensor::new(tb.shape(), d)?);
                }
            }
            Op::MulBias(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let w = tb.numel().max(1);
                if wants(*a) {
                    let d = gd
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * tb.data()[i % w])
                        .collect();
                    send(*a, Tensor::new(ta.shape(), d)?);
                }
                if wants(*b) {
                    let mut d = vec![0.0; tb.numel()];
                    for (i, (x, av)) in gd.iter().zip(ta.data()).enumerate() {
                        d[i % w] += x * av;
                    }
                    send(*b, Tensor::new(tb.shape(), d)?);
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_layout(y.shape(), *axis);
                let yd = y.data();
                let mut d = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                send(*a, Tensor::new(y.shape(), d)?);
            }
            Op::LayerNorm { x, axis, rstd } => {
                let (outer, len, inner) = axis_layout(y.shape(), *axis);
                let yd = y.data();
                let mut d = vec![0.0; yd.len()];
                let nf = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let mg: f64 = (0..len).map(|k| gd[at(k)]).sum::<f64>() / nf;
                        let mgy: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum::<f64>() / nf;
                        let r = rstd[o * inner + i];
                        for k in 0..len {
                            d[at(k)] = r * (gd[at(k)] - mg - yd[at(k)] * mgy);
                        }
                    }
                }
                send(*x, Tensor::new(y.shape(), d)?);
            }
            Op::Gelu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, &z)| x * gelu_grad(z))
                    .collect();
                send(*a, Tensor::new(y.shape(), d)?);
            }
            Op::Conv1d { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (bn, cin, l) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (cout, k) = (tw.shape()[0], tw.shape()[2]);
                let pad = (k - 1) / 2;
                let (xd, wd) = (tx.data(), tw.data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; cout];
                for n in 0..bn {
                    for o in 0..cout {
                        let grow = &gd[(n * cout + o) * l..(n * cout + o + 1) * l];
                        db[o] += grow.iter().sum::<f64>();
                        for c in 0..cin {
                            let xoff = (n * cin + c) * l;
                            for kk in 0..k {
                                let widx = (o * cin + c) * k + kk;
                                let wv = wd[widx];
                                let mut acc = 0.0;
                                for (t, &gv) in grow.iter().enumerate() {
                                    let src = t + kk;
                                    if src >= pad && src - pad < l {
                                        acc += gv * xd[xoff + src - pad];
                                        dx[xoff + src - pad] += gv * wv;
                                    }
                                }
                                dw[widx] += acc;
                            }
                        }
                    }
                }
                send(*x, Tensor::new(tx.shape(), dx)?);
                send(*w, Tensor::new(tw.shape(), dw)?);
                send(*b, Tensor::new(&[cout], db)?);
            }
            Op::MeanPool(a, axis) => {
                let ta = val(*a);
                let (outer, len, inner) = axis_layout(ta.shape(), *axis);
                let mut d = vec![0.0; ta.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            d[o * len * inner + k * inner + i] = gd[o * inner + i] / len as f64;
                        }
                    }
                }
                send(*a, Tensor::new(ta.shape(), d)?);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_layout(y.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let tp = val(*p);
                    let plen = tp.shape()[*axis];
                    if wants(*p) {
                        let mut d = Vec::with_capacity(tp.numel());
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&gd[base..base + plen * inner]);
                        }
                        send(*p, Tensor::new(tp.shape(), d)?);
                    }
                    offset += plen;
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = val(*x);
                let (outer, alen, inner) = axis_layout(tx.shape(), *axis);
                let len = y.shape()[*axis];
                let mut d = vec![0.0; tx.numel()];
                for o in 0..outer {
                    let base = o * alen * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, Tensor::new(tx.shape(), d)?);
            }
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                send(*a, Tensor::new(&[c, r], transpose_raw(gd, r, c))?);
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
            Op::IndexSelect(a, indices) => {
                let ta = val(*a);
                let width = ta.numel() / ta.shape()[0].max(1);
                let mut d = vec![0.0; ta.numel()];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..width {
                        d[i * width + j] += gd[row * width + j];
                    }
                }
                send(*a, Tensor::new(ta.shape(), d)?);
            }
            Op::ScaleRows(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let width = ta.numel() / ts.numel().max(1);
                if wants(*a) {
                    let d = gd
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * ts.data()[i / width])
                        .collect();
                    send(*a, Tensor::new(ta.shape(), d)?);
                }
                if wants(*s) {
                    let mut d = vec![0.0; ts.numel()];
                    for (i, (x, av)) in gd.iter().zip(ta.data()).enumerate() {
                        d[i / width] += x * av;
                    }
                    send(*s, Tensor::new(ts.shape(), d)?);
                }
            }
            Op::StraightThrough(a) => send(*a, g.clone()),
            Op::LogFloor(a, floor) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, &z)| if z > *floor { x / z } else { 0.0 })
                    .collect();
                send(*a, Tensor::new(y.shape(), d)?);
            }
            Op::Abs(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, &z)| {
                        if z > 0.0 {
                            *x
                        } else if z < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    })
                    .collect();
                send(*a, Tensor::new(y.shape(), d)?);
            }
            Op::Mean(a) => {
                let ta = val(*a);
                let v = gd[0] / ta.numel().max(1) as f64;
                send(*a, Tensor::full(ta.shape(), v));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node<'_>], v: Var, g: Tensor) {
    if !nodes[v.0].tracked {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::gradcheck::grad_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(close(tape.value(y).data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, 0, 0.0).unwrap();
        let v = tape.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 3.0;
        let var: f64 = v.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-15 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_kernel_conv_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.constant(t(&[2, 2, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv1d(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let frozen = t(&[2, 2], &[0.5, 0.0, 0.0, 0.5]);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let wv = tape.param("w", &w, true);
        let fv = tape.param("frozen", &frozen, false);
        let h = tape.matmul(x, wv).unwrap();
        let h = tape.matmul(h, fv).unwrap();
        let loss = tape.mean(h);
        let g = tape.backward(loss).unwrap();
        assert!(g.params.contains_key("w"));
        assert!(!g.params.contains_key("frozen"));
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[-2.0, 0.0, 2.0]));
        let a = tape.abs(x);
        let loss = tape.mean(a);
        let g = tape.backward(loss).unwrap();
        assert!(close(
            g.inputs[&x].data(),
            &[-1.0 / 3.0, 0.0, 1.0 / 3.0],
            1e-15
        ));
    }

    #[test]
    fn straight_through_forward_is_one() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[0.2, 0.7]));
        let s = tape.straight_through(x);
        assert_eq!(tape.value(s).data(), &[1.0, 1.0]);
        let c = tape.constant(t(&[2], &[3.0, 5.0]));
        let m = tape.mul(s, c).unwrap();
        let loss = tape.mean(m);
        let g = tape.backward(loss).unwrap();
        assert!(close(g.inputs[&x].data(), &[1.5, 2.5], 1e-15));
    }

    /// Evaluate `build` on a fresh tape with `x` as the single trainable
    /// parameter, returning loss and gradient for the checker.
    fn check_op(x0: Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        grad_check(
            |x| {
                let mut tape = Tape::new();
                let v = tape.param("x", x, true);
                let out = build(&mut tape, v);
                let loss = tape.mean(out);
                let g = tape.backward(loss)?;
                Ok((tape.value(loss).item(), g.params["x"].clone()))
            },
            &x0,
            1e-5,
        )
        .unwrap()
    }

    fn seeded(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    // Weighting by a fixed random tensor keeps the mean loss from
    // cancelling symmetric gradients (e.g. softmax sums to one).
    fn weighted(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let c = tape.constant(seeded(tape.shape(v), seed));
        tape.mul(v, c).unwrap()
    }

    #[test]
    fn grad_check_every_primitive() {
        let x0 = seeded(&[3, 4], 1);
        let other = seeded(&[4, 2], 2);
        let checks: Vec<(&str, f64)> = vec![
            (
                "matmul",
                check_op(x0.clone(), |tp, v| {
                    let o = tp.constant(other.clone());
                    let y = tp.matmul(v, o).unwrap();
                    weighted(tp, y, 3)
                }),
            ),
            (
                "softmax",
                check_op(x0.clone(), |tp, v| {
                    let y = tp.softmax(v, 1).unwrap();
                    weighted(tp, y, 4)
                }),
            ),
            (
                "softmax axis0",
                check_op(x0.clone(), |tp, v| {
                    let y = tp.softmax(v, 0).unwrap();
                    weighted(tp, y, 5)
                }),
            ),
            (
                "layer_norm",
                check_op(x0.clone(), |tp, v| {
                    let y = tp.layer_norm(v, 1, 1e-5).unwrap();
                    weighted(tp, y, 6)
                }),
            ),
            (
                "gelu",
                check_op(x0.clone(), |tp, v| {
                    let y = tp.gelu(v);
                    weighted(tp, y, 7)
                }),
            ),
            (
                "mul",
                check_op(x0.clone(), |tp, v| {
                    let y = tp.mul(v, v).unwrap();
                    weighted(tp, y, 8)
                }),
            ),
            (
                "sub/add/scale",
                check_op(x0.clone(), |tp, v| {
                    let c = tp.constant(seeded(&[3, 4], 9));
                    let a = tp.sub(v, c).unwrap();
                    let b = tp.add(a, v).unwrap();
                    let s = tp.scale(b, -1.7);
                    weighted(tp, s, 10)
                }),
            ),
            (
                "bias ops",
                check_op(x0.clone(), |tp, v| {
                    let row = tp.slice(v, 0, 1, 1).unwrap();
                    let row = tp.reshape(row, &[4]).unwrap();
                    let a = tp.add_bias(v, row).unwrap();
                    let m = tp.mul_bias(a, row).unwrap();
                    weighted(tp, m, 11)
                }),
            ),
            (
                "mean_pool/concat/transpose",
                check_op(x0.clone(), |tp, v| {
                    let p = tp.mean_pool(v, 0).unwrap();
                    let p = tp.reshape(p, &[1, 4]).unwrap();
                    let c = tp.concat(&[v, p, v], 0).unwrap();
                    let tr = tp.transpose(c).unwrap();
                    weighted(tp, tr, 12)
                }),
            ),
            (
                "index_select/scale_rows",
                check_op(x0.clone(), |tp, v| {
                    let sel = tp.index_select(v, &[2, 0, 2]).unwrap();
                    let col = tp.slice(sel, 1, 3, 1).unwrap();
                    let y = tp.scale_rows(sel, col).unwrap();
                    weighted(tp, y, 13)
                }),
            ),
            (
                "log_floor/abs",
                check_op(seeded(&[3, 4], 14).map(|z| z.abs() + 0.5), |tp, v| {
                    let l = tp.log_floor(v, 1e-12);
                    let c = tp.constant(Tensor::full(&[3, 4], 0.1));
                    let d = tp.sub(l, c).unwrap();
                    tp.abs(d)
                }),
            ),
            (
                "conv1d input",
                check_op(seeded(&[2, 3, 5], 15), |tp, v| {
                    let w = tp.constant(seeded(&[4, 3, 3], 16));
                    let b = tp.constant(seeded(&[4], 17));
                    let y = tp.conv1d(v, w, b).unwrap();
                    weighted(tp, y, 18)
                }),
            ),
            (
                "conv1d weight",
                check_op(seeded(&[4, 3, 3], 16), |tp, v| {
                    let x = tp.constant(seeded(&[2, 3, 5], 15));
                    let b = tp.constant(seeded(&[4], 17));
                    let y = tp.conv1d(x, v, b).unwrap();
                    weighted(tp, y, 18)
                }),
            ),
            (
                "conv1d bias",
                check_op(seeded(&[4], 17), |tp, v| {
                    let x = tp.constant(seeded(&[2, 3, 5], 15));
                    let w = tp.constant(seeded(&[4, 3, 3], 16));
                    let y = tp.conv1d(x, w, v).unwrap();
                    weighted(tp, y, 18)
                }),
            ),
        ];
        for (name, err) in checks {
            assert!(err <= 1e-4, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn seeded_backward_sums_contributions() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 3.0);
        let g = tape
            .backward_seeded(&[(y, t(&[2], &[1.0, 1.0])), (x, t(&[2], &[0.5, 0.5]))])
            .unwrap();
        assert!(close(g.inputs[&x].data(), &[3.5, 3.5], 1e-15));
    }
}
