//! Fixtures shared by the integration tests and the acceptance gate.
#![allow(dead_code)]

use rand::Rng;
use repst_core::backbone::{project, BackboneConfig};
use repst_core::compute::{grad_check, DenseMatrix, Tape, Tensor, Var};
use repst_core::dataio::{chrono_split, synth_generate, Dataset, SplitSpec, SynthMode, SynthSpec};
use num_complex::Complex64;
use repst_core::decomposer::{decompose, DecomposeConfig};
use repst_core::normalization::{revin_denorm, revin_norm};
use repst_core::model::{
    batch_loss_and_grads, init_store, prepare_window, rng_stream, ModelConfig, Prepared, Stream,
    VocabMode, SELECTOR, VOCAB_EMBED,
};
use repst_core::params::ParamStore;
use repst_core::patcher::encode_patches;
use repst_core::reprogrammer::{cross_attend, gumbel_noise, gumbel_relax, select_topk, word_scores};
use repst_core::trainer::TrainConfig;
use repst_core::Result;

pub const GRAD_STEP: f64 = 1e-6;

fn mae_against(tape: &mut Tape, y: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(y, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

fn wave(shape: &[usize], freq: f64, amp: f64) -> Tensor {
    Tensor::from_fn(shape, |i| amp * (freq * i as f64 + 0.3).sin())
}

pub fn patch_encoder_error() -> f64 {
    let input = wave(&[6, 3, 4], 0.7, 1.0);
    let b = wave(&[5], 1.1, 0.1);
    let target = wave(&[6, 5], 0.4, 0.5);
    grad_check(
        |w| {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let wv = tape.param("w", w, true);
            let bv = tape.constant(b.clone());
            let tok = encode_patches(&mut tape, x, wv, bv)?;
            let loss = mae_against(&mut tape, tok, &target)?;
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), g.params["w"].clone()))
        },
        &wave(&[5, 3, 3], 0.9, 0.4),
        GRAD_STEP,
    )
    .expect("patch encoder grad check")
}

pub fn word_scores_error() -> f64 {
    let e = wave(&[15, 4], 1.3, 1.0);
    let c = wave(&[15], 0.8, 1.0);
    grad_check(
        |w| {
            let mut tape = Tape::new();
            let ev = tape.constant(e.clone());
            let wv = tape.param("w", w, true);
            let m = word_scores(&mut tape, ev, wv)?;
            let cv = tape.constant(c.clone());
            let p = tape.mul(m, cv)?;
            let s = tape.mean(p);
            let loss = tape.scale(s, 15.0);
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), g.params["w"].clone()))
        },
        &wave(&[4, 1], 0.6, 0.5),
        GRAD_STEP,
    )
    .expect("word score grad check")
}

/// Selector gradient through the scores and the Gumbel relaxation.
pub fn gumbel_path_error() -> f64 {
    let e = wave(&[15, 4], 1.3, 1.0);
    let c = wave(&[15], 0.5, 1.0);
    let noise = gumbel_noise(&mut rng_stream(11, Stream::Gumbel), 15);
    grad_check(
        |w| {
            let mut tape = Tape::new();
            let ev = tape.constant(e.clone());
            let wv = tape.param("w", w, true);
            let m = word_scores(&mut tape, ev, wv)?;
            let r = gumbel_relax(&mut tape, m, &noise, 0.7)?;
            let cv = tape.constant(c.clone());
            let p = tape.mul(r, cv)?;
            let s = tape.mean(p);
            let loss = tape.scale(s, 15.0);
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), g.params["w"].clone()))
        },
        &wave(&[4, 1], 0.6, 0.5),
        GRAD_STEP,
    )
    .expect("gumbel grad check")
}

/// Joint check over the query map, keys and values.
pub fn cross_attend_error() -> f64 {
    let tokens = wave(&[5, 3], 1.7, 1.0);
    let target = wave(&[5, 4], 0.9, 0.6);
    let (nq, nk) = (3 * 4, 6 * 4);
    let x0 = wave(&[nq + 2 * nk], 0.37, 0.8);
    grad_check(
        |x| {
            let split = |a: usize, len: usize, shape: &[usize]| {
                Tensor::new(shape, x.data()[a..a + len].to_vec()).expect("shape")
            };
            let (q, k, v) = (split(0, nq, &[3, 4]), split(nq, nk, &[6, 4]), split(nq + nk, nk, &[6, 4]));
            let mut tape = Tape::new();
            let t = tape.constant(tokens.clone());
            let (qv, kv, vv) = (tape.param("q", &q, true), tape.param("k", &k, true), tape.param("v", &v, true));
            let z = cross_attend(&mut tape, t, qv, kv, vv)?;
            let loss = mae_against(&mut tape, z, &target)?;
            let g = tape.backward(loss)?;
            let mut grad = g.params["q"].data().to_vec();
            grad.extend_from_slice(g.params["k"].data());
            grad.extend_from_slice(g.params["v"].data());
            Ok((tape.value(loss).item(), Tensor::new(&[grad.len()], grad)?))
        },
        &x0,
        GRAD_STEP,
    )
    .expect("cross attention grad check")
}

pub fn projection_error() -> f64 {
    let z = wave(&[6, 3], 0.45, 1.0);
    let b = wave(&[4], 2.0, 0.2);
    let target = wave(&[2, 4], 0.3, 0.4);
    grad_check(
        |w| {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let wv = tape.param("w", w, true);
            let bv = tape.constant(b.clone());
            let y = project(&mut tape, zv, 2, wv, bv)?;
            let loss = mae_against(&mut tape, y, &target)?;
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), g.params["w"].clone()))
        },
        &wave(&[9, 4], 0.77, 0.3),
        GRAD_STEP,
    )
    .expect("projection grad check")
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        input_len: 12,
        horizon: 4,
        patch_len: 4,
        token_dim: 6,
        vocab_size: 20,
        top_words: 5,
        positional: true,
        decompose: DecomposeConfig {
            max_components: 3,
            ..DecomposeConfig::default()
        },
        backbone: BackboneConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            ffn: 12,
            max_seq: 64,
            causal: false,
        },
        ..ModelConfig::default()
    }
}

pub fn toy_window(nodes: usize, len: usize, phase: f64) -> DenseMatrix {
    DenseMatrix::from_fn(nodes, len, |i, t| {
        2.0 + (0.5 * t as f64 + phase + 1.3 * i as f64).sin() + 0.2 * ((5 * t + 3 * i) % 4) as f64
    })
}

fn flatten(store: &ParamStore, names: &[String]) -> Tensor {
    let mut v = Vec::new();
    for n in names {
        v.extend_from_slice(store.get(n).expect("trainable").data());
    }
    Tensor::new(&[v.len()], v).expect("flat")
}

fn unflatten(store: &mut ParamStore, names: &[String], flat: &Tensor) {
    let mut at = 0;
    for n in names {
        let shape = store.get(n).expect("trainable").shape().to_vec();
        let len: usize = shape.iter().product();
        let t = Tensor::new(&shape, flat.data()[at..at + len].to_vec()).expect("slice");
        store.set_trainable(n, t).expect("set");
        at += len;
    }
}

/// Every trainable parameter at once, through the real two-stage batch
/// step on two 2-node windows. The vocabulary selection is held at the
/// base point's top-K (anchored mode) so central differences stay smooth.
pub fn pipeline_error() -> f64 {
    let cfg = toy_config();
    let mut store = init_store(&cfg, 5).expect("store");
    let names = store.trainable_names();
    // Move off the all-zero initial selector and biases to a generic point.
    let mut rng = rng_stream(99, Stream::Init);
    let init = flatten(&store, &names);
    let base = Tensor::from_fn(init.shape(), |i| init.data()[i] + 0.05 * (rng.random::<f64>() - 0.5));
    unflatten(&mut store, &names, &base);

    let windows: Vec<DenseMatrix> = (0..2).map(|k| toy_window(2, 16, 0.9 * k as f64)).collect();
    let preps: Vec<Prepared> = windows
        .iter()
        .map(|w| prepare_window(&cfg, &w.columns(0, 12)).expect("prepare"))
        .collect();
    let targets: Vec<DenseMatrix> = windows.iter().map(|w| w.columns(12, 16)).collect();
    let noise = gumbel_noise(&mut rng_stream(5, Stream::Gumbel), cfg.vocab_size);

    let relaxed = {
        let mut tape = Tape::new();
        let e = store.bind(&mut tape, VOCAB_EMBED).expect("vocab");
        let w = store.bind(&mut tape, SELECTOR).expect("selector");
        let m = word_scores(&mut tape, e, w).expect("scores");
        let r = gumbel_relax(&mut tape, m, &noise, cfg.gumbel_tau).expect("relax");
        tape.value(r).data().to_vec()
    };
    let indices = select_topk(&relaxed, cfg.top_words).expect("topk");
    let anchor: Vec<f64> = indices.iter().map(|&i| relaxed[i]).collect();

    let mut probe = store.clone();
    grad_check(
        |flat| {
            unflatten(&mut probe, &names, flat);
            let batch: Vec<(&Prepared, &DenseMatrix)> = preps.iter().zip(&targets).collect();
            let mode = VocabMode::Anchored {
                noise: &noise,
                indices: &indices,
                anchor: &anchor,
            };
            let (loss, grads) = batch_loss_and_grads(&cfg, &probe, &batch, mode)?;
            let mut g = Vec::with_capacity(flat.numel());
            for n in &names {
                g.extend_from_slice(grads[n].data());
            }
            Ok((loss, Tensor::new(&[g.len()], g)?))
        },
        &base,
        GRAD_STEP,
    )
    .expect("pipeline grad check")
}

pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    vec![
        ("patch encoder", patch_encoder_error()),
        ("word scores", word_scores_error()),
        ("gumbel relaxation", gumbel_path_error()),
        ("cross attention", cross_attend_error()),
        ("projection", projection_error()),
        ("full pipeline", pipeline_error()),
    ]
}

/// Reduced model used for the comparative runs; every structural piece of
/// the default model is present, only the widths are smaller.
pub fn compact_config() -> ModelConfig {
    ModelConfig {
        token_dim: 32,
        vocab_size: 1000,
        top_words: 100,
        backbone: BackboneConfig {
            layers: 3,
            dim: 32,
            heads: 4,
            ffn: 64,
            max_seq: 1024,
            causal: false,
        },
        ..ModelConfig::default()
    }
}

pub fn compact_train(seed: u64, epochs: usize, stride: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        stride,
        seed,
        ..TrainConfig::default()
    }
}

pub fn periodic(nodes: usize, steps: usize, seed: u64) -> Dataset {
    synth_generate(&SynthSpec {
        nodes,
        steps,
        seed,
        mode: SynthMode::PeriodicDiffusion,
        rank: 3,
        snr: 10.0,
    })
    .expect("synthetic data")
    .dataset
}

pub fn split(ds: &Dataset, cfg: &ModelConfig) -> [Dataset; 3] {
    chrono_split(ds, SplitSpec::Fractions(0.7, 0.1, 0.2), cfg.input_len + cfg.horizon).expect("split")
}

pub fn linear(seed: u64, nodes: usize, steps: usize, rank: usize) -> (DenseMatrix, DenseMatrix) {
    let out = synth_generate(&SynthSpec {
        nodes,
        steps,
        seed,
        mode: SynthMode::LinearSystem,
        rank,
        snr: f64::INFINITY,
    })
    .unwrap();
    (out.clean, out.generator.unwrap())
}

pub fn rel_fro(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
}

/// Greedy nearest pairing of two eigenvalue multisets; returns the worst gap.
pub fn spectrum_gap(mut got: Vec<Complex64>, want: &[Complex64]) -> f64 {
    let mut worst = 0.0f64;
    for w in want {
        let (idx, d) = got
            .iter()
            .enumerate()
            .map(|(i, g)| (i, (g - w).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        worst = worst.max(d);
        got.remove(idx);
    }
    worst
}

/// Denoising on periodic-diffusion windows: returns (top-k MSE, raw MSE)
/// against the clean signal.
pub fn denoise_errors(seed: u64, cfg: &DecomposeConfig) -> (f64, f64) {
    let out = synth_generate(&SynthSpec {
        nodes: 16,
        steps: 24,
        seed,
        mode: SynthMode::PeriodicDiffusion,
        rank: 3,
        snr: 10.0,
    })
    .unwrap();
    let x = &out.dataset.values;
    let (xn, st) = revin_norm(x, 1e-5).unwrap();
    let d = decompose(&xn, cfg).unwrap();
    let rec = revin_denorm(&d.x_rec, &st).unwrap();
    let mse = |a: &DenseMatrix| {
        a.sub(&out.clean)
            .unwrap()
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            / a.data().len() as f64
    };
    (mse(&rec), mse(x))
}

pub fn denoise_wins(cfg: &DecomposeConfig) -> usize {
    (0..20)
        .filter(|&s| {
            let (rec, raw) = denoise_errors(s, cfg);
            rec < raw
        })
        .count()
}
