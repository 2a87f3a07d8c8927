//! Plain-text `key = value` run configuration covering every module.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys and
//! malformed values are rejected with the key name and the expected form.
//! `to_text` echoes every key, and feeding that echo back reproduces the
//! same configuration exactly (floats print in shortest round-trip form).

use std::path::Path;
use std::str::FromStr;

use crate::dataio::{Layout, SplitSpec, SynthMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub layout: Layout,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub synth_mode: SynthMode,
    pub synth_nodes: usize,
    pub synth_steps: usize,
    pub synth_rank: usize,
    pub synth_snr: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            layout: Layout::NodesAsRows,
            split_train: 0.7,
            split_val: 0.1,
            split_test: 0.2,
            synth_mode: SynthMode::PeriodicDiffusion,
            synth_nodes: 16,
            synth_steps: 2000,
            synth_rank: 3,
            synth_snr: 10.0,
        }
    }
}

impl DataConfig {
    pub fn split(&self) -> SplitSpec {
        SplitSpec::Fractions(self.split_train, self.split_val, self.split_test)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    /// Master seed: synthetic data, trainable init and every training
    /// stream derive from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str, form: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!(
            "key {key}: expected {form}, got {value:?}"
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "key {key}: expected true or false, got {value:?}"
        ))),
    }
}

const COUNT: &str = "a non-negative integer";
const REAL: &str = "a real number";

impl RunConfig {
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    i + 1
                ))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {assignment:?}: expected key=value"))
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "seed" => self.seed = parse(key, v, COUNT)?,
            "input_len" => m.input_len = parse(key, v, COUNT)?,
            "horizon" => m.horizon = parse(key, v, COUNT)?,
            "patch_len" => m.patch_len = parse(key, v, COUNT)?,
            "token_dim" => m.token_dim = parse(key, v, COUNT)?,
            "vocab_size" => m.vocab_size = parse(key, v, COUNT)?,
            "top_words" => m.top_words = parse(key, v, COUNT)?,
            "gumbel_tau" => m.gumbel_tau = parse(key, v, REAL)?,
            "revin_eps" => m.revin_eps = parse(key, v, REAL)?,
            "rank_cap" => m.decompose.rank_cap = parse(key, v, COUNT)?,
            "sv_tol" => m.decompose.sv_tol = parse(key, v, REAL)?,
            "top_k" => m.decompose.top_k = parse(key, v, COUNT)?,
            "max_components" => m.decompose.max_components = parse(key, v, COUNT)?,
            "dmd_tls" => m.decompose.tls = parse_bool(key, v)?,
            "dmd_refine" => m.decompose.refine = parse_bool(key, v)?,
            "ablate_decomposition" => m.ablate_decomposition = parse_bool(key, v)?,
            "positional" => m.positional = parse_bool(key, v)?,
            "backbone_layers" => m.backbone.layers = parse(key, v, COUNT)?,
            "backbone_dim" => m.backbone.dim = parse(key, v, COUNT)?,
            "backbone_heads" => m.backbone.heads = parse(key, v, COUNT)?,
            "backbone_ffn" => m.backbone.ffn = parse(key, v, COUNT)?,
            "backbone_max_seq" => m.backbone.max_seq = parse(key, v, COUNT)?,
            "causal_mask" => m.backbone.causal = parse_bool(key, v)?,
            "backbone_seed" => m.backbone_seed = parse(key, v, COUNT)?,
            "learning_rate" => t.learning_rate = parse(key, v, REAL)?,
            "adam_beta1" => t.beta1 = parse(key, v, REAL)?,
            "adam_beta2" => t.beta2 = parse(key, v, REAL)?,
            "adam_eps" => t.adam_eps = parse(key, v, REAL)?,
            "epochs" => t.epochs = parse(key, v, COUNT)?,
            "batch_size" => t.batch_size = parse(key, v, COUNT)?,
            "subgraph_size" => t.subgraph_size = parse(key, v, COUNT)?,
            "few_shot" => t.few_shot = parse(key, v, REAL)?,
            "patience" => t.patience = parse(key, v, COUNT)?,
            "clip_norm" => t.clip_norm = parse(key, v, REAL)?,
            "stride" => t.stride = parse(key, v, COUNT)?,
            "decomposition_cache" => t.use_cache = parse_bool(key, v)?,
            "layout" => d.layout = parse(key, v, "rows or cols")?,
            "split_train" => d.split_train = parse(key, v, REAL)?,
            "split_val" => d.split_val = parse(key, v, REAL)?,
            "split_test" => d.split_test = parse(key, v, REAL)?,
            "synth_mode" => d.synth_mode = parse(key, v, "linear-system or periodic-diffusion")?,
            "synth_nodes" => d.synth_nodes = parse(key, v, COUNT)?,
            "synth_steps" => d.synth_steps = parse(key, v, COUNT)?,
            "synth_rank" => d.synth_rank = parse(key, v, COUNT)?,
            "synth_snr" => d.synth_snr = parse(key, v, "a positive real number or inf")?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown configuration key {key:?}"
                )))
            }
        }
        Ok(())
    }

    /// Every key with its current value, in echo order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        vec![
            ("seed", self.seed.to_string()),
            ("input_len", m.input_len.to_string()),
            ("horizon", m.horizon.to_string()),
            ("patch_len", m.patch_len.to_string()),
            ("token_dim", m.token_dim.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("top_words", m.top_words.to_string()),
            ("gumbel_tau", m.gumbel_tau.to_string()),
            ("revin_eps", m.revin_eps.to_string()),
            ("rank_cap", m.decompose.rank_cap.to_string()),
            ("sv_tol", m.decompose.sv_tol.to_string()),
            ("top_k", m.decompose.top_k.to_string()),
            ("max_components", m.decompose.max_components.to_string()),
            ("dmd_tls", m.decompose.tls.to_string()),
            ("dmd_refine", m.decompose.refine.to_string()),
            ("ablate_decomposition", m.ablate_decomposition.to_string()),
            ("positional", m.positional.to_string()),
            ("backbone_layers", m.backbone.layers.to_string()),
            ("backbone_dim", m.backbone.dim.to_string()),
            ("backbone_heads", m.backbone.heads.to_string()),
            ("backbone_ffn", m.backbone.ffn.to_string()),
            ("backbone_max_seq", m.backbone.max_seq.to_string()),
            ("causal_mask", m.backbone.causal.to_string()),
            ("backbone_seed", m.backbone_seed.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("adam_beta1", t.beta1.to_string()),
            ("adam_beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("subgraph_size", t.subgraph_size.to_string()),
            ("few_shot", t.few_shot.to_string()),
            ("patience", t.patience.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("stride", t.stride.to_string()),
            ("decomposition_cache", t.use_cache.to_string()),
            ("layout", d.layout.to_string()),
            ("split_train", d.split_train.to_string()),
            ("split_val", d.split_val.to_string()),
            ("split_test", d.split_test.to_string()),
            ("synth_mode", d.synth_mode.to_string()),
            ("synth_nodes", d.synth_nodes.to_string()),
            ("synth_steps", d.synth_steps.to_string()),
            ("synth_rank", d.synth_rank.to_string()),
            ("synth_snr", d.synth_snr.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Cross-module constraints; the training seed follows the master seed.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        let fr = [d.split_train, d.split_val, d.split_test];
        if fr.iter().any(|&f| !(f > 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split_train, split_val and split_test must be positive and sum to 1 (got {fr:?})"
            )));
        }
        if !(d.synth_snr > 0.0) {
            return Err(Error::Config(format!(
                "synth_snr must be positive (got {})",
                d.synth_snr
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
