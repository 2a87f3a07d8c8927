//! Frozen pre-norm transformer encoder standing in for the pretrained
//! language model, and the trainable projection head.
//!
//! Tokens of all nodes are flattened into one sequence of length N * P.
//! Each block is `x + MHSA(LN(x))` then `x + FFN(LN(x))` with no final
//! normalization, so zero weights give the identity map. Weights are drawn
//! from N(0, 0.02) and rounded to f32 at init, which makes a checkpoint
//! round trip bit-exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::compute::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::params::ParamStore;

pub const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_seq: usize,
    pub causal: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: 128,
            heads: 4,
            ffn: 512,
            max_seq: 1024,
            causal: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) || self.ffn == 0 {
            return Err(Error::Config(format!(
                "backbone needs layers >= 1, ffn >= 1 and dim divisible by heads (got layers={}, dim={}, heads={}, ffn={})",
                self.layers, self.dim, self.heads, self.ffn
            )));
        }
        Ok(())
    }

    /// Entry names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.dim, self.ffn);
        let mut out = Vec::new();
        for l in 0..self.layers {
            let p = format!("backbone.{l}");
            out.push((format!("{p}.ln1.g"), vec![d]));
            out.push((format!("{p}.ln1.b"), vec![d]));
            for m in ["q", "k", "v", "o"] {
                out.push((format!("{p}.attn.w{m}"), vec![d, d]));
                out.push((format!("{p}.attn.b{m}"), vec![d]));
            }
            out.push((format!("{p}.ln2.g"), vec![d]));
            out.push((format!("{p}.ln2.b"), vec![d]));
            out.push((format!("{p}.ffn.w1"), vec![d, f]));
            out.push((format!("{p}.ffn.b1"), vec![f]));
            out.push((format!("{p}.ffn.w2"), vec![f, d]));
            out.push((format!("{p}.ffn.b2"), vec![d]));
        }
        out
    }
}

/// Deterministic frozen backbone: N(0, 0.02) weights, zero biases, unit
/// layer-norm gains.
pub fn init_seeded(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    let mut store = ParamStore::new();
    for (name, shape) in cfg.layout() {
        let leaf = name.rsplit('.').next().unwrap_or_default();
        let t = if leaf == "g" {
            Tensor::full(&shape, 1.0)
        } else if leaf.starts_with('b') {
            Tensor::zeros(&shape)
        } else {
            Tensor::from_fn(&shape, |_| f64::from(normal.sample(&mut rng) as f32))
        };
        store.insert(&name, t, true)?;
    }
    Ok(store)
}

fn layer_norm(tape: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var> {
    let n = tape.layer_norm(x, 1, LN_EPS)?;
    let scaled = tape.mul_bias(n, g)?;
    tape.add_bias(scaled, b)
}

fn affine<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
    let (wv, bv) = (store.bind(tape, w)?, store.bind(tape, b)?);
    let y = tape.matmul(x, wv)?;
    tape.add_bias(y, bv)
}

/// Multi-head self-attention over `x` [S, d]; also returns each head's
/// attention matrix.
fn self_attention<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    cfg: &BackboneConfig,
    prefix: &str,
    x: Var,
) -> Result<(Var, Vec<Var>)> {
    let s = tape.shape(x)[0];
    let q = affine(tape, store, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = affine(tape, store, x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = affine(tape, store, x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let dh = cfg.dim / cfg.heads;
    let mask = cfg.causal.then(|| {
        Tensor::from_fn(&[s, s], |i| if i % s > i / s { MASKED } else { 0.0 })
    });
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut probs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(raw, 1.0 / (dh as f64).sqrt());
        if let Some(m) = &mask {
            let mv = tape.constant(m.clone());
            scores = tape.add(scores, mv)?;
        }
        let p = tape.softmax(scores, 1)?;
        probs.push(p);
        heads.push(tape.matmul(p, vh)?);
    }
    let cat = tape.concat(&heads, 1)?;
    let out = affine(tape, store, cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
    Ok((out, probs))
}

/// Run the encoder over `z` [N * P, d]; returns the same shape.
pub fn backbone_forward<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    cfg: &BackboneConfig,
    z: Var,
) -> Result<Var> {
    Ok(forward_traced(tape, store, cfg, z)?.0)
}

/// `backbone_forward` plus every attention matrix, layer by layer.
pub fn forward_traced<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    cfg: &BackboneConfig,
    z: Var,
) -> Result<(Var, Vec<Var>)> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != cfg.dim {
        return Err(contract(format!(
            "backbone expects [sequence, {}], got {shape:?}",
            cfg.dim
        )));
    }
    if shape[0] > cfg.max_seq {
        return Err(contract(format!(
            "sequence of {} tokens exceeds the backbone maximum {}; lower the subgraph size (subgraph_size) so N * P fits",
            shape[0], cfg.max_seq
        )));
    }
    let mut x = z;
    let mut probs = Vec::new();
    for l in 0..cfg.layers {
        let p = format!("backbone.{l}");
        let (g1, b1) = (
            store.bind(tape, &format!("{p}.ln1.g"))?,
            store.bind(tape, &format!("{p}.ln1.b"))?,
        );
        let h = layer_norm(tape, x, g1, b1)?;
        let (a, pr) = self_attention(tape, store, cfg, &format!("{p}.attn"), h)?;
        probs.extend(pr);
        x = tape.add(x, a)?;
        let (g2, b2) = (
            store.bind(tape, &format!("{p}.ln2.g"))?,
            store.bind(tape, &format!("{p}.ln2.b"))?,
        );
        let h = layer_norm(tape, x, g2, b2)?;
        let f = affine(tape, store, h, &format!("{p}.ffn.w1"), &format!("{p}.ffn.b1"))?;
        let f = tape.gelu(f);
        let f = affine(tape, store, f, &format!("{p}.ffn.w2"), &format!("{p}.ffn.b2"))?;
        x = tape.add(x, f)?;
    }
    Ok((x, probs))
}

/// Per node, flatten its P tokens and map them to the horizon:
/// `z_text` [N * P, d] -> `y_norm` [N, tau].
pub fn project(tape: &mut Tape, z_text: Var, nodes: usize, w: Var, b: Var) -> Result<Var> {
    let s = tape.shape(z_text).to_vec();
    let width = tape.shape(w)[0];
    if nodes == 0 || s.len() != 2 || !s[0].is_multiple_of(nodes) || (s[0] / nodes) * s[1] != width {
        return Err(contract(format!(
            "project: tokens {s:?} for {nodes} nodes do not match head input width {width}"
        )));
    }
    let flat = tape.reshape(z_text, &[nodes, width])?;
    let y = tape.matmul(flat, w)?;
    tape.add_bias(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::compute::grad_check;

    fn small() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            ffn: 16,
            max_seq: 64,
            causal: false,
        }
    }

    fn run(store: &ParamStore, cfg: &BackboneConfig, z: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let y = backbone_forward(&mut tape, store, cfg, zv).unwrap();
        tape.value(y).clone()
    }

    fn tokens(s: usize, d: usize) -> Tensor {
        Tensor::from_fn(&[s, d], |i| ((i * 31) % 17) as f64 * 0.2 - 1.5)
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = small();
        let a = init_seeded(&cfg, 7).unwrap();
        assert_eq!(a.frozen_digest(), init_seeded(&cfg, 7).unwrap().frozen_digest());
        assert_ne!(a.frozen_digest(), init_seeded(&cfg, 8).unwrap().frozen_digest());
        assert!(a.iter().all(|(_, e)| e.frozen));
        assert_eq!(a.get("backbone.1.ln2.g").unwrap().data(), &[1.0; 8]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = init_seeded(&small(), 3).unwrap();
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&s).unwrap()).unwrap();
        assert_eq!(back.frozen_digest(), s.frozen_digest());
    }

    #[test]
    fn zero_weights_are_the_identity() {
        let cfg = small();
        let mut store = ParamStore::new();
        for (name, shape) in cfg.layout() {
            let fill = if name.ends_with(".g") { 1.0 } else { 0.0 };
            store.insert(&name, Tensor::full(&shape, fill), true).unwrap();
        }
        let z = tokens(6, 8);
        assert_eq!(run(&store, &cfg, &z), z);
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let cfg = small();
        let store = init_seeded(&cfg, 11).unwrap().scaled_for_test(20.0);
        let z = tokens(5, 8);
        let perm = [3usize, 0, 4, 1, 2];
        let zp = Tensor::from_fn(&[5, 8], |i| z.data()[perm[i / 8] * 8 + i % 8]);
        let (y, yp) = (run(&store, &cfg, &z), run(&store, &cfg, &zp));
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp.data()[r * 8 + c] - y.data()[src * 8 + c]).abs() < 1e-12);
            }
        }
        assert!((y.data()[0] - z.data()[0]).abs() > 1e-6, "backbone should not be trivial");
    }

    #[test]
    fn attention_rows_are_distributions_and_mask_is_causal() {
        for causal in [false, true] {
            let cfg = BackboneConfig { causal, ..small() };
            let store = init_seeded(&cfg, 5).unwrap().scaled_for_test(30.0);
            let mut tape = Tape::new();
            let z = tape.constant(tokens(6, 8));
            let (_, probs) = forward_traced(&mut tape, &store, &cfg, z).unwrap();
            assert_eq!(probs.len(), cfg.layers * cfg.heads);
            for p in probs {
                for (i, row) in tape.value(p).data().chunks(6).enumerate() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    if causal {
                        assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let cfg = BackboneConfig { max_seq: 4, ..small() };
        let store = init_seeded(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(tokens(5, 8));
        let err = backbone_forward(&mut tape, &store, &cfg, z).unwrap_err();
        assert!(err.to_string().contains("subgraph"));
    }

    #[test]
    fn gradient_reaches_upstream_but_not_frozen_weights() {
        let cfg = small();
        let store = init_seeded(&cfg, 2).unwrap().scaled_for_test(20.0);
        let z0 = tokens(4, 8).map(|v| v * 0.5);
        let target = Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.7).sin());
        let err = grad_check(
            |z| {
                let mut tape = Tape::new();
                let zv = tape.param("z", z, true);
                let y = backbone_forward(&mut tape, &store, &cfg, zv)?;
                let t = tape.constant(target.clone());
                let d = tape.sub(y, t)?;
                let a = tape.abs(d);
                let loss = tape.mean(a);
                let g = tape.backward(loss)?;
                assert_eq!(g.params.len(), 1);
                Ok((tape.value(loss).item(), g.params["z"].clone()))
            },
            &z0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn projection_constant_map_and_gradient() {
        let w = Tensor::zeros(&[2 * 3, 4]);
        let b = Tensor::from_fn(&[4], |i| i as f64);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_fn(&[4, 3], |i| i as f64));
        let (wv, bv) = (tape.constant(w), tape.constant(b));
        let y = project(&mut tape, z, 2, wv, bv).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0]);

        let z = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.3).cos());
        let w0 = Tensor::from_fn(&[6, 4], |i| ((i * 5) % 7) as f64 * 0.1 - 0.3);
        let target = Tensor::from_fn(&[2, 4], |i| i as f64 * 0.1);
        let err = grad_check(
            |w| {
                let mut tape = Tape::new();
                let zv = tape.constant(z.clone());
                let wv = tape.param("w", w, true);
                let bv = tape.constant(Tensor::zeros(&[4]));
                let y = project(&mut tape, zv, 2, wv, bv)?;
                let t = tape.constant(target.clone());
                let d = tape.sub(y, t)?;
                let a = tape.abs(d);
                let loss = tape.mean(a);
                let g = tape.backward(loss)?;
                Ok((tape.value(loss).item(), g.params["w"].clone()))
            },
            &w0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    impl ParamStore {
        /// Amplify the random weights so the blocks act non-trivially.
        fn scaled_for_test(&self, factor: f64) -> ParamStore {
            let mut out = ParamStore::new();
            for (name, e) in self.iter() {
                let t = if name.rsplit('.').next().is_some_and(|l| l.starts_with('w')) {
                    e.tensor.map(|v| v * factor)
                } else {
                    e.tensor.clone()
                };
                out.insert(name, t, e.frozen).unwrap();
            }
            out
        }
    }
}
