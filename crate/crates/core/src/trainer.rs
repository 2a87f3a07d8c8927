//! End-to-end optimization of the trainable parameters with MAE and Adam.
//!
//! Each optimizer step takes one node group from a per-epoch partition and
//! one batch of windows. Gumbel noise is drawn fresh every step. Window
//! decompositions are computed once up front (unless the cache is
//! disabled, which recomputes them each time with identical results).

use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint;
use crate::compute::{DenseMatrix, Tensor};
use crate::dataio::{make_windows, Dataset, WindowSample};
use crate::error::{Error, Result};
use crate::evaluator::{forecast_prepared, MetricAccumulator, MetricReport};
use crate::model::{
    batch_loss_and_grads, prepare_window, rng_stream, ModelConfig, Prepared, Stream, VocabMode,
};
use crate::params::ParamStore;
use crate::reprogrammer::gumbel_noise;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Largest node group per step.
    pub subgraph_size: usize,
    pub seed: u64,
    /// Earliest fraction of the training windows to use.
    pub few_shot: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
    pub stride: usize,
    pub use_cache: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            batch_size: 8,
            subgraph_size: 64,
            seed: 0,
            few_shot: 1.0,
            patience: 10,
            clip_norm: 5.0,
            stride: 1,
            use_cache: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive (got {})", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie strictly between 0 and 1 (got {b})"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm > 0.0) {
            return bad("adam_eps and clip_norm must be positive".into());
        }
        if self.batch_size == 0 || self.subgraph_size == 0 || self.stride == 0 {
            return bad("batch_size, subgraph_size and stride must be at least 1".into());
        }
        if !(self.few_shot > 0.0 && self.few_shot <= 1.0) {
            return bad(format!("few_shot must lie in (0, 1] (got {})", self.few_shot));
        }
        Ok(())
    }
}

/// Adam with bias correction over named tensors.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
    step: u64,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// Apply one update. Every gradient is checked before anything moves,
    /// so a non-finite gradient leaves parameters and moments untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {name:?}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let mut p = store.get(name)?.clone();
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                *pi -= cfg.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
            }
            store.set_trainable(name, p)?;
        }
        Ok(())
    }
}

/// Rescale gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}

/// Shuffle 0..n and chop it into contiguous groups of at most `n_max`.
pub fn partition_graph<R: Rng>(n: usize, n_max: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(n_max.max(1)).map(<[usize]>::to_vec).collect()
}

/// Number of training windows kept under a few-shot fraction.
pub fn few_shot_count(total: usize, fraction: f64) -> usize {
    if total == 0 {
        return 0;
    }
    ((total as f64 * fraction).ceil() as usize).clamp(1, total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each completed epoch.
    pub epoch_loss: Vec<f64>,
    /// Validation metrics before training, then after each epoch.
    pub validation: Vec<MetricReport>,
    /// Epoch (1-based) whose parameters were kept; `None` keeps the initial
    /// parameters.
    pub best_epoch: Option<usize>,
    pub steps: u64,
    pub train_windows: usize,
    pub frozen_digest_before: u64,
    pub frozen_digest_after: u64,
    /// Excluded from equality: wall time is not reproducible.
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn best_validation(&self) -> &MetricReport {
        &self.validation[self.best_epoch.unwrap_or(0)]
    }

    /// Equality of everything except wall time.
    pub fn same_run(&self, other: &TrainReport) -> bool {
        let strip = |r: &TrainReport| TrainReport {
            wall_seconds: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    /// Line-oriented text: one `key value` line per scalar and one line per
    /// epoch.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("train_windows {}\n", self.train_windows));
        out.push_str(&format!("steps {}\n", self.steps));
        let v0 = &self.validation[0];
        out.push_str(&format!("epoch 0 train_loss - val_mae {} val_rmse {}\n", v0.mae, v0.rmse));
        for (i, loss) in self.epoch_loss.iter().enumerate() {
            let v = &self.validation[i + 1];
            out.push_str(&format!(
                "epoch {} train_loss {loss} val_mae {} val_rmse {}\n",
                i + 1,
                v.mae,
                v.rmse
            ));
        }
        match self.best_epoch {
            Some(e) => out.push_str(&format!("best_epoch {e}\n")),
            None => out.push_str("best_epoch initial\n"),
        }
        out.push_str(&format!("frozen_digest_before {:016x}\n", self.frozen_digest_before));
        out.push_str(&format!("frozen_digest_after {:016x}\n", self.frozen_digest_after));
        out.push_str(&format!("wall_seconds {:.3}\n", self.wall_seconds));
        out
    }
}

struct WindowSet {
    windows: Vec<WindowSample>,
    cache: Option<Vec<Prepared>>,
}

impl WindowSet {
    fn new(cfg: &ModelConfig, windows: Vec<WindowSample>, cached: bool) -> Result<Self> {
        let cache = if cached {
            Some(
                windows
                    .iter()
                    .map(|w| prepare_window(cfg, &w.input))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self { windows, cache })
    }

    fn prepared(&self, cfg: &ModelConfig, i: usize) -> Result<Prepared> {
        match &self.cache {
            Some(c) => Ok(c[i].clone()),
            None => prepare_window(cfg, &self.windows[i].input),
        }
    }

    fn all_prepared(&self, cfg: &ModelConfig) -> Result<Vec<Prepared>> {
        (0..self.windows.len()).map(|i| self.prepared(cfg, i)).collect()
    }
}

fn select_rows(m: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(rows.len(), m.cols(), |i, j| m[(rows[i], j)])
}

fn validate(
    cfg: &ModelConfig,
    store: &ParamStore,
    set: &WindowSet,
    preps: &[Prepared],
    subgraph_size: usize,
) -> Result<MetricReport> {
    let preds = forecast_prepared(cfg, store, preps, subgraph_size)?;
    let mut acc = MetricAccumulator::new(cfg.horizon);
    for (p, w) in preds.iter().zip(&set.windows) {
        acc.add(p, &w.target)?;
    }
    acc.finish()
}

/// Train `store` in place on `train_ds`, selecting the best epoch on
/// `val_ds`. On a numerical failure the last good parameters are written to
/// `abort_checkpoint` (when given) before the error is returned.
pub fn train(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    train_ds: &Dataset,
    val_ds: &Dataset,
    tc: &TrainConfig,
    abort_checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    let started = Instant::now();
    cfg.validate()?;
    tc.validate()?;
    crate::model::check_store(cfg, store)?;
    let mut windows = make_windows(train_ds, cfg.input_len, cfg.horizon, tc.stride);
    windows.truncate(few_shot_count(windows.len(), tc.few_shot));
    let val_windows = make_windows(val_ds, cfg.input_len, cfg.horizon, tc.stride);
    if windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Config(format!(
            "training needs at least one window in both splits (train {} steps, validation {} steps, window {} + {})",
            train_ds.time_count(),
            val_ds.time_count(),
            cfg.input_len,
            cfg.horizon
        )));
    }
    let train_set = WindowSet::new(cfg, windows, tc.use_cache)?;
    let val_set = WindowSet::new(cfg, val_windows, true)?;
    let val_preps = val_set.all_prepared(cfg)?;

    let digest_before = store.frozen_digest();
    let mut report = TrainReport {
        epoch_loss: Vec::new(),
        validation: vec![validate(cfg, store, &val_set, &val_preps, tc.subgraph_size)?],
        best_epoch: None,
        steps: 0,
        train_windows: train_set.windows.len(),
        frozen_digest_before: digest_before,
        frozen_digest_after: digest_before,
        wall_seconds: 0.0,
    };
    let mut best_mae = report.validation[0].mae;
    let mut best = store.snapshot_trainables();
    let mut stale = 0;

    let mut part_rng = rng_stream(tc.seed, Stream::Partition);
    let mut batch_rng = rng_stream(tc.seed, Stream::Batches);
    let mut gumbel_rng = rng_stream(tc.seed, Stream::Gumbel);
    let mut adam = Adam::new();
    let nodes = train_ds.node_count();

    for epoch in 1..=tc.epochs {
        let groups = partition_graph(nodes, tc.subgraph_size, &mut part_rng);
        let mut order: Vec<usize> = (0..train_set.windows.len()).collect();
        order.shuffle(&mut batch_rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            for group in &groups {
                let preps = chunk
                    .iter()
                    .map(|&i| Ok(train_set.prepared(cfg, i)?.select_nodes(group)))
                    .collect::<Result<Vec<_>>>()?;
                let targets: Vec<DenseMatrix> = chunk
                    .iter()
                    .map(|&i| select_rows(&train_set.windows[i].target, group))
                    .collect();
                let batch: Vec<(&Prepared, &DenseMatrix)> = preps.iter().zip(&targets).collect();
                let noise = gumbel_noise(&mut gumbel_rng, cfg.vocab_size);
                let step = batch_loss_and_grads(cfg, store, &batch, VocabMode::Train(&noise))
                    .and_then(|(loss, mut grads)| {
                        clip_global_norm(&mut grads, tc.clip_norm);
                        adam.step(store, &grads, tc)?;
                        Ok(loss)
                    });
                let loss = match step {
                    Ok(l) => l,
                    Err(e @ Error::Numerical(_)) => {
                        if let Some(path) = abort_checkpoint {
                            checkpoint::save(store, path)?;
                        }
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                loss_sum += loss;
                loss_n += 1;
                report.steps += 1;
            }
        }
        report.epoch_loss.push(loss_sum / loss_n as f64);
        let v = validate(cfg, store, &val_set, &val_preps, tc.subgraph_size)?;
        if v.mae < best_mae {
            best_mae = v.mae;
            best = store.snapshot_trainables();
            report.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        report.validation.push(v);
        if stale >= tc.patience {
            break;
        }
    }
    store.restore_trainables(&best)?;
    report.frozen_digest_after = store.frozen_digest();
    if report.frozen_digest_after != digest_before {
        return Err(Error::Contract(
            "frozen parameters changed during training".into(),
        ));
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::full(&[3], 2.0), false).unwrap();
        let mut adam = Adam::new();
        let grads: IndexMap<String, Tensor> = [("x".to_string(), Tensor::zeros(&[3]))].into();
        adam.step(&mut store, &grads, &TrainConfig::default()).unwrap();
        assert_eq!(store.get("x").unwrap().data(), &[2.0; 3]);
        let (m, v) = adam.moments("x").unwrap();
        assert_eq!((m.sum_sq(), v.sum_sq()), (0.0, 0.0));
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::full(&[1], 1.0), false).unwrap();
        let mut adam = Adam::new();
        let cfg = TrainConfig::default();
        let g1: IndexMap<String, Tensor> = [("x".to_string(), Tensor::full(&[1], 1.0))].into();
        adam.step(&mut store, &g1, &cfg).unwrap();
        let m1 = adam.moments("x").unwrap().0.item();
        let g0: IndexMap<String, Tensor> = [("x".to_string(), Tensor::zeros(&[1]))].into();
        adam.step(&mut store, &g0, &cfg).unwrap();
        assert!((adam.moments("x").unwrap().0.item() - 0.9 * m1).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::full(&[1], 1.0), false).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new();
        for _ in 0..500 {
            let x = store.get("x").unwrap().item();
            let g: IndexMap<String, Tensor> = [("x".to_string(), Tensor::full(&[1], 2.0 * x))].into();
            adam.step(&mut store, &g, &cfg).unwrap();
        }
        let x = store.get("x").unwrap().item();
        assert!(x * x < 1e-3, "f = {}", x * x);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2]), false).unwrap();
        let g: IndexMap<String, Tensor> =
            [("w".to_string(), Tensor::new(&[2], vec![0.0, f64::NAN]).unwrap())].into();
        let err = Adam::new().step(&mut store, &g, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("\"w\""));
        assert_eq!(store.get("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g: IndexMap<String, Tensor> = [
            ("a".to_string(), Tensor::full(&[4], 3.0)),
            ("b".to_string(), Tensor::full(&[1], 4.0)),
        ]
        .into();
        let before = clip_global_norm(&mut g, 5.0);
        assert!((before - 52f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
    }

    #[test]
    fn partition_sizes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let groups = partition_graph(10, 4, &mut rng);
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = groups.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(partition_graph(10, 10, &mut rng).len(), 1);
        let a = partition_graph(9, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let b = partition_graph(9, 2, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn few_shot_keeps_at_least_one_window() {
        assert_eq!(few_shot_count(100, 0.05), 5);
        assert_eq!(few_shot_count(10, 0.01), 1);
        assert_eq!(few_shot_count(7, 1.0), 7);
    }
}
