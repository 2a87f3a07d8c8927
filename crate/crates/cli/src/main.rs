//! `repst` command-line driver.
//!
//! Every invocation resolves one effective configuration (defaults, then the
//! `--config` file, then `--set` and dedicated flags), writes it to
//! `config.txt` in a fresh run directory `<runs-dir>/<timestamp>-seed<seed>-<command>`
//! and places every artifact of the run next to it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use repst_core::checkpoint;
use repst_core::compute::{Tape, Tensor};
use repst_core::config::RunConfig;
use repst_core::dataio::{
    chrono_split, forward_fill, load_matrix, save_binary, save_csv, synth_generate, Dataset,
    SynthMode, SynthSpec,
};
use repst_core::decomposer::decompose;
use repst_core::evaluator::{evaluate, EvalSpec, Forecaster, MetricReport, Protocol};
use repst_core::model::{check_store, init_store, init_vocab, SELECTOR, VOCAB_EMBED};
use repst_core::normalization::revin_norm;
use repst_core::params::ParamStore;
use repst_core::reprogrammer::{select_topk, word_scores};
use repst_core::trainer::train;
use repst_core::{backbone, Error, Result};

#[derive(Parser)]
#[command(name = "repst", version, about = "Decomposition-reprogrammed forecasting on a frozen transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Decompose one input window and summarize its modes.
    Decompose(DecomposeArgs),
    /// Train the forecaster and keep the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint or the persistence baseline.
    Eval(EvalArgs),
    /// Dump the current top-K vocabulary words and scores.
    InspectVocab(InspectArgs),
    /// Write the seeded frozen backbone and vocabulary.
    InitBackbone(InitArgs),
}

#[derive(Args)]
struct Common {
    /// Plain-text key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    backbone_layers: Option<usize>,
    #[arg(long)]
    backbone_dim: Option<usize>,
    #[arg(long)]
    backbone_seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    mode: Option<SynthMode>,
    #[arg(long)]
    snr: Option<f64>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// First time step of the window.
    #[arg(long, default_value_t = 0)]
    start: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Fraction of the earliest training windows to use.
    #[arg(long)]
    few_shot: Option<f64>,
    /// Start from this checkpoint; entries it lacks are freshly initialized.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint; its run's config.txt is used as the base config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score a baseline instead of a checkpoint.
    #[arg(long, value_parser = ["hi"])]
    baseline: Option<String>,
    #[arg(long, default_value = "full")]
    protocol: Protocol,
    /// Also print one comma-separated row per horizon step.
    #[arg(long)]
    horizon_csv: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    common: Common,
    /// Output path; defaults to backbone.ckpt in the run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn resolve(common: &Common, base: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = common.config.as_deref().or(base) {
        cfg = RunConfig::from_file(p)?;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = common.backbone_layers {
        cfg.model.backbone.layers = v;
    }
    if let Some(v) = common.backbone_dim {
        cfg.model.backbone.dim = v;
    }
    if let Some(v) = common.backbone_seed {
        cfg.model.backbone_seed = v;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Create the run directory and record the effective configuration.
fn open_run(common: &Common, cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    cfg.validate()?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let stem = format!("{stamp}-seed{}-{command}", cfg.seed);
    let mut dir = common.runs_dir.join(&stem);
    let mut n = 2;
    while dir.exists() {
        dir = common.runs_dir.join(format!("{stem}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let echo = cfg.to_text();
    write(&dir.join("config.txt"), &echo)?;
    eprint!("# effective configuration\n{echo}");
    println!("run directory {}", dir.display());
    Ok(dir)
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let ds = load_matrix(path, cfg.data.layout)?;
    if ds.missing_count() > 0 {
        forward_fill(&ds)
    } else {
        Ok(ds)
    }
}

fn require_checkpoint(path: Option<&PathBuf>, command: &str) -> Result<PathBuf> {
    path.cloned().ok_or_else(|| {
        Error::MissingArtifact(format!("{command} needs a trained checkpoint (--checkpoint PATH)"))
    })
}

fn sibling_config(ckpt: Option<&PathBuf>) -> Option<PathBuf> {
    let p = ckpt?.parent()?.join("config.txt");
    p.exists().then_some(p)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    let d = &mut cfg.data;
    d.synth_nodes = a.nodes.unwrap_or(d.synth_nodes);
    d.synth_steps = a.steps.unwrap_or(d.synth_steps);
    d.synth_mode = a.mode.unwrap_or(d.synth_mode);
    d.synth_snr = a.snr.unwrap_or(d.synth_snr);
    let dir = open_run(&a.common, &cfg, "synth")?;
    let d = &cfg.data;
    let out = synth_generate(&SynthSpec {
        nodes: d.synth_nodes,
        steps: d.synth_steps,
        seed: cfg.seed,
        mode: d.synth_mode,
        rank: d.synth_rank,
        snr: d.synth_snr,
    })?;
    save_csv(&out.dataset, &dir.join("data.csv"))?;
    save_binary(&out.dataset, &dir.join("data.bin"))?;
    save_csv(&Dataset::from_matrix(out.clean, "unspecified"), &dir.join("clean.csv"))?;
    let meta: String = out
        .metadata
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    write(&dir.join("metadata.txt"), &meta)?;
    print!("{meta}");
    Ok(())
}

fn cmd_decompose(a: &DecomposeArgs) -> Result<()> {
    let cfg = resolve(&a.common, None)?;
    let dir = open_run(&a.common, &cfg, "decompose")?;
    let ds = load_data(&a.data, &cfg)?;
    let t = cfg.model.input_len;
    if a.start + t > ds.time_count() {
        return Err(Error::Input(format!(
            "window [{}, {}) exceeds the {} available steps",
            a.start,
            a.start + t,
            ds.time_count()
        )));
    }
    let window = ds.slice_time(a.start, t).values;
    let (xn, _) = revin_norm(&window, cfg.model.revin_eps)?;
    let dec = decompose(&xn, &cfg.model.decompose)?;
    let ms = &dec.modeset;
    let mut store = ParamStore::new();
    let vec = |v: Vec<f64>| Tensor::new(&[v.len()], v);
    store.insert("x_dec", dec.x_dec.clone(), true)?;
    store.insert("lambda_re", vec(ms.lambdas.iter().map(|l| l.re).collect())?, true)?;
    store.insert("lambda_im", vec(ms.lambdas.iter().map(|l| l.im).collect())?, true)?;
    store.insert("amplitude_re", vec(ms.amplitudes.iter().map(|l| l.re).collect())?, true)?;
    store.insert("amplitude_im", vec(ms.amplitudes.iter().map(|l| l.im).collect())?, true)?;
    store.insert("energies", vec(ms.energies.clone())?, true)?;
    checkpoint::save(&store, &dir.join("decomposition.bin"))?;
    let mut summary = ms.summary();
    for w in &dec.warnings {
        summary.push_str(&format!("warning: {w}\n"));
    }
    write(&dir.join("modes.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    if let Some(f) = a.few_shot {
        cfg.train.few_shot = f;
    }
    let dir = open_run(&a.common, &cfg, "train")?;
    let ds = load_data(&a.data, &cfg)?;
    let m = &cfg.model;
    let [tr, va, _] = chrono_split(&ds, cfg.data.split(), m.input_len + m.horizon)?;
    let mut store = init_store(m, cfg.seed)?;
    if let Some(p) = &a.checkpoint {
        let mut loaded = checkpoint::load(p)?;
        for (name, e) in store.iter() {
            if !loaded.contains(name) {
                loaded.insert(name, e.tensor.clone(), e.frozen)?;
            }
        }
        check_store(m, &loaded)?;
        store = loaded;
    }
    let report = train(m, &mut store, &tr, &va, &cfg.train_config(), Some(&dir.join("abort.ckpt")))?;
    checkpoint::save(&store, &dir.join("best.ckpt"))?;
    let text = report.to_text();
    write(&dir.join("report.txt"), &text)?;
    write(&dir.join("validation_horizon.csv"), &report.best_validation().horizon_csv())?;
    print!("{text}");
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let base = if a.baseline.is_none() { sibling_config(a.checkpoint.as_ref()) } else { None };
    let cfg = resolve(&a.common, base.as_deref())?;
    let dir = open_run(&a.common, &cfg, "eval")?;
    let ds = load_data(&a.data, &cfg)?;
    let (t, tau) = (cfg.model.input_len, cfg.model.horizon);
    let target = match a.protocol {
        Protocol::ZeroShot => ds,
        Protocol::Full | Protocol::FewShot => {
            let [_, _, te] = chrono_split(&ds, cfg.data.split(), t + tau)?;
            te
        }
    };
    let spec = EvalSpec {
        input_len: t,
        horizon: tau,
        stride: 1,
        subgraph_size: cfg.train.subgraph_size,
        protocol: a.protocol,
    };
    let report: MetricReport = if a.baseline.is_some() {
        evaluate(&Forecaster::Hi, &target, &spec)?
    } else {
        let path = require_checkpoint(a.checkpoint.as_ref(), "eval")?;
        let store = checkpoint::load(&path)?;
        // The model keeps the shape it was trained with; overrides only
        // change the evaluation windows.
        let model = match &base {
            Some(p) if a.common.config.is_none() => RunConfig::from_file(p)?.model,
            _ => cfg.model.clone(),
        };
        evaluate(&Forecaster::Model { cfg: &model, store: &store }, &target, &spec)?
    };
    let text = format!("{:<8} {:>14}\n{}", "protocol", a.protocol, report.to_text());
    write(&dir.join("eval.txt"), &text)?;
    write(&dir.join("horizon.csv"), &report.horizon_csv())?;
    print!("{text}");
    if a.horizon_csv {
        print!("{}", report.horizon_csv());
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let path = require_checkpoint(a.checkpoint.as_ref(), "inspect-vocab")?;
    let base = sibling_config(a.checkpoint.as_ref());
    let cfg = resolve(&a.common, base.as_deref())?;
    let dir = open_run(&a.common, &cfg, "inspect-vocab")?;
    let store = checkpoint::load(&path)?;
    check_store(&cfg.model, &store)?;
    let mut tape = Tape::new();
    let e = store.bind(&mut tape, VOCAB_EMBED)?;
    let w = store.bind(&mut tape, SELECTOR)?;
    let m = word_scores(&mut tape, e, w)?;
    let scores = tape.value(m).data().to_vec();
    let mut text = format!("{:>6} {:>8} {:>14}\n", "rank", "word", "score");
    for (r, i) in select_topk(&scores, cfg.model.top_words)?.into_iter().enumerate() {
        text.push_str(&format!("{:>6} {i:>8} {:>14.8}\n", r + 1, scores[i]));
    }
    write(&dir.join("vocab.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_init(a: &InitArgs) -> Result<()> {
    let cfg = resolve(&a.common, None)?;
    let dir = open_run(&a.common, &cfg, "init-backbone")?;
    let m = &cfg.model;
    let mut store = backbone::init_seeded(&m.backbone, m.backbone_seed)?;
    store.insert(VOCAB_EMBED, init_vocab(m.vocab_size, m.text_dim(), m.backbone_seed), true)?;
    let out = a.checkpoint.clone().unwrap_or_else(|| dir.join("backbone.ckpt"));
    checkpoint::save(&store, &out)?;
    println!("frozen digest {:016x}", store.frozen_digest());
    println!("wrote {}", out.display());
    Ok(())
}

fn category(e: &Error) -> &'static str {
    match e.exit_code() {
        1 => "runtime",
        2 => "config",
        _ => "data",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectVocab(a) => cmd_inspect(a),
        Command::InitBackbone(a) => cmd_init(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", category(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
