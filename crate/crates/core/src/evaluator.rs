//! Metrics, the historical-inertia baseline and the evaluation protocols.
//!
//! Headline numbers are flat averages over every window, node and horizon
//! step. Per-horizon lists average over windows and nodes only, so the mean
//! of `horizon_mae` is the headline MAE and the root of the mean squared
//! `horizon_rmse` is the headline RMSE.

use std::fmt;
use std::str::FromStr;

use crate::compute::DenseMatrix;
use crate::dataio::{make_windows, Dataset, WindowSample};
use crate::error::{contract, Error, Result};
use crate::model::{predict, prepare_window, ModelConfig, Prepared};
use crate::params::ParamStore;

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(contract(format!(
            "metric inputs differ in length: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("no elements to average".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub horizon_mae: Vec<f64>,
    pub horizon_rmse: Vec<f64>,
    /// Number of evaluation windows.
    pub samples: usize,
}

impl MetricReport {
    /// Aligned text block.
    pub fn to_text(&self) -> String {
        format!(
            "{:<8} {:>14}\n{:<8} {:>14.6}\n{:<8} {:>14.6}\n",
            "samples", self.samples, "mae", self.mae, "rmse", self.rmse
        )
    }

    /// One `horizon,mae,rmse` row per step, with a header.
    pub fn horizon_csv(&self) -> String {
        let mut out = String::from("horizon,mae,rmse\n");
        for (h, (m, r)) in self.horizon_mae.iter().zip(&self.horizon_rmse).enumerate() {
            out.push_str(&format!("{},{m},{r}\n", h + 1));
        }
        out
    }
}

/// Running sums per horizon step.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    abs: Vec<f64>,
    sq: Vec<f64>,
    counts: Vec<usize>,
    samples: usize,
}

impl MetricAccumulator {
    pub fn new(horizon: usize) -> Self {
        Self {
            abs: vec![0.0; horizon],
            sq: vec![0.0; horizon],
            counts: vec![0; horizon],
            samples: 0,
        }
    }

    pub fn add(&mut self, pred: &DenseMatrix, target: &DenseMatrix) -> Result<()> {
        if (pred.rows(), pred.cols()) != (target.rows(), target.cols())
            || target.cols() != self.abs.len()
        {
            return Err(contract(format!(
                "forecast {}x{} against target {}x{} with horizon {}",
                pred.rows(),
                pred.cols(),
                target.rows(),
                target.cols(),
                self.abs.len()
            )));
        }
        for i in 0..pred.rows() {
            for h in 0..pred.cols() {
                let e = pred[(i, h)] - target[(i, h)];
                self.abs[h] += e.abs();
                self.sq[h] += e * e;
                self.counts[h] += 1;
            }
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricReport> {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return Err(Error::UndefinedMetric("no evaluation windows".into()));
        }
        let horizon_mae = self
            .abs
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| s / c as f64)
            .collect();
        let horizon_rmse = self
            .sq
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| (s / c as f64).sqrt())
            .collect();
        Ok(MetricReport {
            mae: self.abs.iter().sum::<f64>() / total as f64,
            rmse: (self.sq.iter().sum::<f64>() / total as f64).sqrt(),
            horizon_mae,
            horizon_rmse,
            samples: self.samples,
        })
    }
}

/// Repeat each node's last observed value across the horizon.
pub fn hi_baseline(window: &WindowSample) -> DenseMatrix {
    let (x, tau) = (&window.input, window.target.cols());
    let last = x.cols() - 1;
    DenseMatrix::from_fn(x.rows(), tau, |i, _| x[(i, last)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Full,
    FewShot,
    ZeroShot,
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Protocol::Full),
            "few-shot" => Ok(Protocol::FewShot),
            "zero-shot" => Ok(Protocol::ZeroShot),
            _ => Err("expected full, few-shot or zero-shot".into()),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Full => "full",
            Protocol::FewShot => "few-shot",
            Protocol::ZeroShot => "zero-shot",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Forecaster<'m> {
    Hi,
    Model {
        cfg: &'m ModelConfig,
        store: &'m ParamStore,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSpec {
    pub input_len: usize,
    pub horizon: usize,
    pub stride: usize,
    /// Largest node group per forward pass.
    pub subgraph_size: usize,
    pub protocol: Protocol,
}

/// Contiguous node groups of at most `size` nodes, in index order.
pub fn node_chunks(nodes: usize, size: usize) -> Vec<Vec<usize>> {
    let size = size.max(1);
    (0..nodes)
        .step_by(size)
        .map(|s| (s..(s + size).min(nodes)).collect())
        .collect()
}

/// Model forecasts for prepared windows, running at most `subgraph_size`
/// nodes through the backbone at a time.
pub fn forecast_prepared(
    cfg: &ModelConfig,
    store: &ParamStore,
    preps: &[Prepared],
    subgraph_size: usize,
) -> Result<Vec<DenseMatrix>> {
    let Some(first) = preps.first() else {
        return Ok(Vec::new());
    };
    let chunks = node_chunks(first.nodes, subgraph_size);
    if chunks.len() == 1 {
        return predict(cfg, store, preps);
    }
    let mut out: Vec<DenseMatrix> = preps
        .iter()
        .map(|p| DenseMatrix::zeros(p.nodes, cfg.horizon))
        .collect();
    for chunk in &chunks {
        let sub: Vec<Prepared> = preps.iter().map(|p| p.select_nodes(chunk)).collect();
        for (full, part) in out.iter_mut().zip(predict(cfg, store, &sub)?) {
            for (r, &node) in chunk.iter().enumerate() {
                for h in 0..cfg.horizon {
                    full[(node, h)] = part[(r, h)];
                }
            }
        }
    }
    Ok(out)
}

/// Score a forecaster on every window of `ds`.
pub fn evaluate(f: &Forecaster, ds: &Dataset, spec: &EvalSpec) -> Result<MetricReport> {
    if let Forecaster::Model { cfg, store } = f {
        if cfg.input_len != spec.input_len || cfg.horizon != spec.horizon {
            let why = match spec.protocol {
                Protocol::ZeroShot => "zero-shot transfer keeps every trained shape, which depends on T, T_P, D, d and tau but never on N",
                _ => "a trained model only accepts the window shape it was trained with",
            };
            return Err(Error::Protocol(format!(
                "model uses T={} tau={} but evaluation asks for T={} tau={}: {why}",
                cfg.input_len, cfg.horizon, spec.input_len, spec.horizon
            )));
        }
        crate::model::check_store(cfg, store)?;
    }
    let windows = make_windows(ds, spec.input_len, spec.horizon, spec.stride.max(1));
    let mut acc = MetricAccumulator::new(spec.horizon);
    match f {
        Forecaster::Hi => {
            for w in &windows {
                acc.add(&hi_baseline(w), &w.target)?;
            }
        }
        Forecaster::Model { cfg, store } => {
            let preps = windows
                .iter()
                .map(|w| prepare_window(cfg, &w.input))
                .collect::<Result<Vec<_>>>()?;
            let preds = forecast_prepared(cfg, store, &preps, spec.subgraph_size)?;
            for (p, w) in preds.iter().zip(&windows) {
                acc.add(p, &w.target)?;
            }
        }
    }
    acc.finish()
}
