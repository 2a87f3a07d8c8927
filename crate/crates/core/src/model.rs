//! The assembled forecaster: window preparation (RevIN, decomposition,
//! patches), the vocabulary stage shared by all windows of a step, and the
//! per-window forward from patch tokens to denormalized forecasts.
//!
//! Splitting the vocabulary stage from the window stage keeps the K x d
//! key/value products to one evaluation per optimizer step. Window tapes
//! receive keys and values as tracked inputs; their gradients are summed
//! and fed back through the vocabulary tape with `backward_seeded`.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{self, BackboneConfig};
use crate::compute::{DenseMatrix, Gradients, Tape, Tensor, Var};
use crate::decomposer::{broadcast_raw, decompose, DecomposeConfig};
use crate::error::{contract, Error, Result};
use crate::normalization::{revin_norm, NormState};
use crate::params::ParamStore;
use crate::patcher::{self, make_patches, PATCH_KERNEL};
use crate::reprogrammer::{self, Selection};

pub const VOCAB_EMBED: &str = "vocab.embed";
pub const SELECTOR: &str = "reprog.select";
pub const PATCH_W: &str = "patch.w";
pub const PATCH_B: &str = "patch.b";
pub const QUERY_W: &str = "reprog.wq";
pub const KEY_W: &str = "reprog.wk";
pub const VALUE_W: &str = "reprog.wv";
pub const POS_TABLE: &str = "pos.table";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Partition = 2,
    Gumbel = 3,
    Batches = 4,
}

pub fn rng_stream(master: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(purpose as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub patch_len: usize,
    /// Patch token width D.
    pub token_dim: usize,
    pub vocab_size: usize,
    pub top_words: usize,
    pub gumbel_tau: f64,
    pub revin_eps: f64,
    pub decompose: DecomposeConfig,
    /// Replace the decomposition with the raw window on every channel.
    pub ablate_decomposition: bool,
    /// Learned per-patch position table added before the backbone.
    pub positional: bool,
    pub backbone: BackboneConfig,
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 24,
            horizon: 24,
            patch_len: 6,
            token_dim: 64,
            vocab_size: 5000,
            top_words: 1000,
            gumbel_tau: 1.0,
            revin_eps: 1e-5,
            decompose: DecomposeConfig::default(),
            ablate_decomposition: false,
            positional: false,
            backbone: BackboneConfig::default(),
            backbone_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn patches(&self) -> usize {
        patcher::patch_count(self.input_len, self.patch_len)
    }

    pub fn channels(&self) -> usize {
        self.decompose.max_components + 1
    }

    pub fn text_dim(&self) -> usize {
        self.backbone.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_len < 3 || self.horizon == 0 {
            return bad(format!(
                "input_len must be >= 3 and horizon >= 1 (got {} and {})",
                self.input_len, self.horizon
            ));
        }
        if self.patch_len == 0 || self.patch_len > self.input_len {
            return bad(format!(
                "patch_len must lie in 1..={} (got {})",
                self.input_len, self.patch_len
            ));
        }
        if self.top_words == 0 || self.top_words > self.vocab_size {
            return bad(format!(
                "top_words must lie in 1..=vocab_size={} (got {})",
                self.vocab_size, self.top_words
            ));
        }
        if !(self.gumbel_tau > 0.0) {
            return bad(format!("gumbel_tau must be positive (got {})", self.gumbel_tau));
        }
        if !(self.revin_eps > 0.0) {
            return bad(format!("revin_eps must be positive (got {})", self.revin_eps));
        }
        if self.token_dim == 0 || self.decompose.top_k == 0 || self.decompose.rank_cap == 0 {
            return bad("token_dim, top_k and rank_cap must be at least 1".into());
        }
        Ok(())
    }

    /// Shapes of the trainable parameters; none depends on the node count.
    pub fn trainable_layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (dd, d, p) = (self.token_dim, self.text_dim(), self.patches());
        let mut out = vec![
            (SELECTOR, vec![d, 1]),
            (PATCH_W, vec![dd, self.channels(), PATCH_KERNEL]),
            (PATCH_B, vec![dd]),
            (QUERY_W, vec![dd, d]),
            (KEY_W, vec![d, d]),
            (VALUE_W, vec![d, d]),
        ];
        if self.positional {
            out.push((POS_TABLE, vec![p, d]));
        }
        out.push((HEAD_W, vec![p * d, self.horizon]));
        out.push((HEAD_B, vec![self.horizon]));
        out
    }
}

/// Frozen word bank: seeded N(0, 1) rows rounded to f32.
pub fn init_vocab(vocab_size: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x76_6f63_6162);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    Tensor::from_fn(&[vocab_size, dim], |_| {
        f64::from(normal.sample(&mut rng) as f32)
    })
}

/// Full parameter store: frozen backbone and vocabulary from
/// `cfg.backbone_seed`, trainables from the init stream of `seed`.
pub fn init_store(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = backbone::init_seeded(&cfg.backbone, cfg.backbone_seed)?;
    store.insert(
        VOCAB_EMBED,
        init_vocab(cfg.vocab_size, cfg.text_dim(), cfg.backbone_seed),
        true,
    )?;
    let mut rng = rng_stream(seed, Stream::Init);
    for (name, shape) in cfg.trainable_layout() {
        let t = match name {
            SELECTOR | PATCH_B | HEAD_B => Tensor::zeros(&shape),
            POS_TABLE => {
                let normal = Normal::new(0.0, 0.02).expect("valid normal");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            }
            _ => {
                let fan_in: usize = if name == PATCH_W {
                    shape[1] * shape[2]
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid normal");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            }
        };
        store.insert(name, t, false)?;
    }
    Ok(store)
}

/// Check that `store` holds every entry `cfg` needs with matching shapes.
pub fn check_store(cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let mut expect: Vec<(String, Vec<usize>, bool)> = cfg
        .backbone
        .layout()
        .into_iter()
        .map(|(n, s)| (n, s, true))
        .collect();
    expect.push((VOCAB_EMBED.into(), vec![cfg.vocab_size, cfg.text_dim()], true));
    expect.extend(
        cfg.trainable_layout()
            .into_iter()
            .map(|(n, s)| (n.to_string(), s, false)),
    );
    for (name, shape, frozen) in expect {
        let e = store.entry(&name).ok_or_else(|| {
            Error::MissingArtifact(format!("checkpoint lacks parameter {name:?}"))
        })?;
        if e.tensor.shape() != shape.as_slice() || e.frozen != frozen {
            return Err(Error::CorruptCheckpoint(format!(
                "entry {name:?}: expected shape {shape:?} (frozen={frozen}), found {:?} (frozen={})",
                e.tensor.shape(),
                e.frozen
            )));
        }
    }
    Ok(())
}

/// One window ready for the network: patch conv input and RevIN state.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// [N * P, C + 1, T_P]
    pub conv_input: Tensor,
    pub norm: NormState,
    pub nodes: usize,
    pub patches: usize,
}

impl Prepared {
    pub fn select_nodes(&self, nodes: &[usize]) -> Prepared {
        let s = self.conv_input.shape();
        let block = self.patches * s[1] * s[2];
        let mut data = Vec::with_capacity(nodes.len() * block);
        for &n in nodes {
            data.extend_from_slice(&self.conv_input.data()[n * block..(n + 1) * block]);
        }
        Prepared {
            conv_input: Tensor::new(&[nodes.len() * self.patches, s[1], s[2]], data)
                .expect("block sizes are consistent"),
            norm: NormState {
                mean: nodes.iter().map(|&n| self.norm.mean[n]).collect(),
                std: nodes.iter().map(|&n| self.norm.std[n]).collect(),
                eps: self.norm.eps,
            },
            nodes: nodes.len(),
            patches: self.patches,
        }
    }
}

/// RevIN, then decomposition (or the raw broadcast when ablated), then
/// patches.
pub fn prepare_window(cfg: &ModelConfig, input: &DenseMatrix) -> Result<Prepared> {
    if input.cols() != cfg.input_len {
        return Err(contract(format!(
            "window has {} steps, model expects input_len {}",
            input.cols(),
            cfg.input_len
        )));
    }
    let (xn, norm) = revin_norm(input, cfg.revin_eps)?;
    let x_dec = if cfg.ablate_decomposition {
        broadcast_raw(&xn, cfg.decompose.max_components)
    } else {
        decompose(&xn, &cfg.decompose)?.x_dec
    };
    let p = make_patches(&x_dec, cfg.patch_len)?;
    Ok(Prepared {
        conv_input: p.conv_input(),
        nodes: input.rows(),
        patches: p.patches(),
        norm,
    })
}

/// How the vocabulary stage picks its words.
#[derive(Debug, Clone)]
pub enum VocabMode<'n> {
    /// Gumbel-perturbed relaxation with the given noise draw.
    Train(&'n Tensor),
    /// Deterministic top-K of the plain scores.
    Eval,
    /// Fixed indices with gates `m'[i] - anchor[i] + 1`: forward value one
    /// at the anchor point, and smooth in the selector so finite
    /// differences see what the straight-through estimator reports.
    Anchored {
        noise: &'n Tensor,
        indices: &'n [usize],
        anchor: &'n [f64],
    },
}

pub struct VocabStage {
    pub selection: Selection,
    pub keys: Var,
    pub values: Var,
}

pub fn vocab_stage<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    cfg: &ModelConfig,
    mode: VocabMode,
) -> Result<VocabStage> {
    let e = store.bind(tape, VOCAB_EMBED)?;
    let w = store.bind(tape, SELECTOR)?;
    let m = reprogrammer::word_scores(tape, e, w)?;
    let (selection, e_sel) = match mode {
        VocabMode::Train(noise) => {
            let relaxed = reprogrammer::gumbel_relax(tape, m, noise, cfg.gumbel_tau)?;
            reprogrammer::sample_words(tape, e, relaxed, cfg.top_words)?
        }
        VocabMode::Eval => reprogrammer::sample_words(tape, e, m, cfg.top_words)?,
        VocabMode::Anchored {
            noise,
            indices,
            anchor,
        } => {
            let relaxed = reprogrammer::gumbel_relax(tape, m, noise, cfg.gumbel_tau)?;
            let rows = tape.index_select(e, indices)?;
            let picked = tape.index_select(relaxed, indices)?;
            let offset = tape.constant(Tensor::from_fn(&[indices.len()], |i| 1.0 - anchor[i]));
            let gate = tape.add(picked, offset)?;
            let e_sel = tape.scale_rows(rows, gate)?;
            let sel = Selection {
                indices: indices.to_vec(),
                weights: tape.value(relaxed).data().to_vec(),
            };
            (sel, e_sel)
        }
    };
    let (wk, wv) = (store.bind(tape, KEY_W)?, store.bind(tape, VALUE_W)?);
    let (keys, values) = reprogrammer::keys_values(tape, e_sel, wk, wv)?;
    Ok(VocabStage {
        selection,
        keys,
        values,
    })
}

/// Patch tokens -> cross-attention -> backbone -> projection -> denorm.
/// Returns forecasts [n, tau] in the data's original scale.
pub fn window_forward<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    cfg: &ModelConfig,
    keys: Var,
    values: Var,
    prep: &Prepared,
) -> Result<Var> {
    let x = tape.constant(prep.conv_input.clone());
    let (pw, pb) = (store.bind(tape, PATCH_W)?, store.bind(tape, PATCH_B)?);
    let tokens = patcher::encode_patches(tape, x, pw, pb)?;
    let wq = store.bind(tape, QUERY_W)?;
    let mut z = reprogrammer::cross_attend(tape, tokens, wq, keys, values)?;
    let d = cfg.text_dim();
    if cfg.positional {
        let pos = store.bind(tape, POS_TABLE)?;
        let z3 = tape.reshape(z, &[prep.nodes, prep.patches, d])?;
        let z3 = tape.add_bias(z3, pos)?;
        z = tape.reshape(z3, &[prep.nodes * prep.patches, d])?;
    }
    let z_text = backbone::backbone_forward(tape, store, &cfg.backbone, z)?;
    let (hw, hb) = (store.bind(tape, HEAD_W)?, store.bind(tape, HEAD_B)?);
    let y_norm = backbone::project(tape, z_text, prep.nodes, hw, hb)?;
    let scales = tape.constant(Tensor::from_fn(&[prep.nodes], |i| prep.norm.scale(i)));
    let scaled = tape.scale_rows(y_norm, scales)?;
    let h = cfg.horizon;
    let means = tape.constant(Tensor::from_fn(&[prep.nodes, h], |i| prep.norm.mean[i / h]));
    tape.add(scaled, means)
}

/// Mean absolute error on the tape; subgradient 0 at a zero residual.
pub fn mae_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

pub fn matrix_tensor(m: &DenseMatrix) -> Tensor {
    Tensor::new(&[m.rows(), m.cols()], m.data().to_vec()).expect("matrix shape")
}

/// Forecasts for prepared windows, evaluated without Gumbel noise.
pub fn predict(cfg: &ModelConfig, store: &ParamStore, preps: &[Prepared]) -> Result<Vec<DenseMatrix>> {
    let mut vt = Tape::new();
    let vs = vocab_stage(&mut vt, store, cfg, VocabMode::Eval)?;
    let (keys, values) = (vt.value(vs.keys).clone(), vt.value(vs.values).clone());
    preps
        .iter()
        .map(|p| {
            let mut tape = Tape::new();
            let (k, v) = (tape.constant_ref(&keys), tape.constant_ref(&values));
            let y = window_forward(&mut tape, store, cfg, k, v, p)?;
            let t = tape.value(y);
            DenseMatrix::from_vec(t.shape()[0], t.shape()[1], t.data().to_vec())
        })
        .collect()
}

/// Mean MAE over a batch of (window, target) pairs and the gradient of
/// every trainable parameter.
pub fn batch_loss_and_grads(
    cfg: &ModelConfig,
    store: &ParamStore,
    batch: &[(&Prepared, &DenseMatrix)],
    mode: VocabMode,
) -> Result<(f64, IndexMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(contract("empty training batch"));
    }
    let mut vt = Tape::new();
    let vs = vocab_stage(&mut vt, store, cfg, mode)?;
    let (keys, values) = (vt.value(vs.keys).clone(), vt.value(vs.values).clone());
    let weight = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: IndexMap<String, Tensor> = IndexMap::new();
    let mut gk = Tensor::zeros(keys.shape());
    let mut gv = Tensor::zeros(values.shape());
    for (prep, target) in batch {
        let mut tape = Tape::new();
        let (k, v) = (tape.input(keys.clone()), tape.input(values.clone()));
        let y = window_forward(&mut tape, store, cfg, k, v, prep)?;
        let t = tape.constant(matrix_tensor(target));
        let loss = mae_loss(&mut tape, y, t)?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss {l}")));
        }
        total += weight * l;
        let scaled = tape.scale(loss, weight);
        let g = tape.backward(scaled)?;
        add_input(&mut gk, &g, k);
        add_input(&mut gv, &g, v);
        accumulate(&mut grads, g.params);
    }
    let g = vt.backward_seeded(&[(vs.keys, gk), (vs.values, gv)])?;
    accumulate(&mut grads, g.params);
    Ok((total, grads))
}

fn accumulate(into: &mut IndexMap<String, Tensor>, from: IndexMap<String, Tensor>) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                into.insert(name, g);
            }
        }
    }
}

fn add_input(acc: &mut Tensor, g: &Gradients, v: Var) {
    if let Some(t) = g.inputs.get(&v) {
        acc.add_assign(t);
    }
}
