//! Loading, gap filling, chronological splits, sliding windows and the
//! synthetic generators.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint;
use crate::compute::{pinv, DenseMatrix, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Node x time observations. Missing cells hold NaN and are flagged in
/// `missing`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub values: DenseMatrix,
    pub missing: Vec<bool>,
    pub frequency: String,
}

impl Dataset {
    /// A complete dataset; non-finite cells are marked missing.
    pub fn from_matrix(values: DenseMatrix, frequency: &str) -> Self {
        let missing = values.data().iter().map(|v| !v.is_finite()).collect();
        Self {
            values,
            missing,
            frequency: frequency.to_string(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.values.rows()
    }

    pub fn time_count(&self) -> usize {
        self.values.cols()
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Time range `start..start + len` of every node.
    pub fn slice_time(&self, start: usize, len: usize) -> Dataset {
        let n = self.node_count();
        let tc = self.time_count();
        Dataset {
            values: self.values.columns(start, start + len),
            missing: (0..n)
                .flat_map(|i| self.missing[i * tc + start..i * tc + start + len].to_vec())
                .collect(),
            frequency: self.frequency.clone(),
        }
    }

    /// Rows of the given nodes, in the given order.
    pub fn select_nodes(&self, nodes: &[usize]) -> Dataset {
        let tc = self.time_count();
        Dataset {
            values: DenseMatrix::from_fn(nodes.len(), tc, |i, t| self.values[(nodes[i], t)]),
            missing: nodes
                .iter()
                .flat_map(|&n| self.missing[n * tc..(n + 1) * tc].to_vec())
                .collect(),
            frequency: self.frequency.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    NodesAsRows,
    NodesAsCols,
}

impl FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rows" => Ok(Layout::NodesAsRows),
            "cols" => Ok(Layout::NodesAsCols),
            _ => Err("expected rows or cols".into()),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::NodesAsRows => "rows",
            Layout::NodesAsCols => "cols",
        })
    }
}

fn parse_cell(field: &str) -> Option<f64> {
    field.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn read_csv(bytes: &[u8], path: &Path) -> Result<DenseMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let mut first = true;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Input(format!("{}: line {line}: {e}", path.display()))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if first {
            first = false;
            if rec
                .iter()
                .all(|f| parse_cell(f).is_none() && !f.trim().is_empty())
            {
                continue; // header row
            }
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Input(format!(
                    "{}: line {line}: ragged row with {} fields, expected {w}",
                    path.display(),
                    rec.len()
                )))
            }
            _ => {}
        }
        rows.push(
            rec.iter()
                .map(|f| parse_cell(f).unwrap_or(f64::NAN))
                .collect(),
        );
    }
    if rows.is_empty() {
        return Err(Error::Input(format!(
            "{}: line 1: no data rows",
            path.display()
        )));
    }
    DenseMatrix::from_rows(&rows)
}

/// Read a comma-separated grid or a binary tensor container (entry
/// `values`, NaN marking missing cells).
pub fn load_matrix(path: &Path, layout: Layout) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingArtifact(format!("data file {} does not exist", path.display()))
        }
        _ => Error::io(path, e),
    })?;
    let grid = if bytes.starts_with(checkpoint::MAGIC) {
        let store = checkpoint::from_bytes(&bytes)?;
        let t = store.get("values").map_err(|_| {
            Error::Input(format!(
                "{}: container has no `values` entry",
                path.display()
            ))
        })?;
        if t.rank() != 2 || t.numel() == 0 {
            return Err(Error::Input(format!(
                "{}: `values` must be a non-empty matrix, got shape {:?}",
                path.display(),
                t.shape()
            )));
        }
        DenseMatrix::from_vec(t.shape()[0], t.shape()[1], t.data().to_vec())?
    } else {
        read_csv(&bytes, path)?
    };
    let values = match layout {
        Layout::NodesAsRows => grid,
        Layout::NodesAsCols => grid.transpose(),
    };
    Ok(Dataset::from_matrix(values, "unspecified"))
}

/// Write node rows as CSV; values are printed with round-trip precision.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for n in 0..ds.node_count() {
        let row: Vec<String> = ds
            .values
            .row(n)
            .iter()
            .map(|v| {
                if v.is_finite() {
                    v.to_string()
                } else {
                    String::new()
                }
            })
            .collect();
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Write node rows into the binary container (entry `values`).
pub fn save_binary(ds: &Dataset, path: &Path) -> Result<()> {
    let mut store = ParamStore::new();
    let v = &ds.values;
    store.insert(
        "values",
        Tensor::new(&[v.rows(), v.cols()], v.data().to_vec())?,
        true,
    )?;
    checkpoint::save(&store, path)
}

/// Fill each gap with the previous observation of the same node; a leading
/// gap takes the node's first observation.
pub fn forward_fill(ds: &Dataset) -> Result<Dataset> {
    let (n, tc) = (ds.node_count(), ds.time_count());
    let mut values = ds.values.clone();
    for node in 0..n {
        let observed = |t: usize| !ds.missing[node * tc + t];
        let first = (0..tc).find(|&t| observed(t)).ok_or_else(|| {
            Error::Input(format!("node {node} has no observed values to fill from"))
        })?;
        let mut last = ds.values[(node, first)];
        for t in 0..tc {
            if observed(t) {
                last = ds.values[(node, t)];
            } else {
                values[(node, t)] = last;
            }
        }
    }
    Ok(Dataset {
        values,
        missing: vec![false; n * tc],
        frequency: ds.frequency.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    Fractions(f64, f64, f64),
    Lengths(usize, usize, usize),
}

pub fn split_lengths(time_count: usize, spec: SplitSpec) -> Result<(usize, usize, usize)> {
    match spec {
        SplitSpec::Fractions(a, b, c) => {
            if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
                )));
            }
            let part = |f: f64| (f * time_count as f64 + 1e-9).floor() as usize;
            let (val, test) = (part(b), part(c));
            Ok((time_count - val - test, val, test))
        }
        SplitSpec::Lengths(a, b, c) => {
            if a + b + c != time_count {
                return Err(Error::Config(format!(
                    "explicit split lengths ({a}, {b}, {c}) sum to {} but the series has {time_count} steps",
                    a + b + c
                )));
            }
            Ok((a, b, c))
        }
    }
}

/// Contiguous train/val/test ranges; each must hold at least `min_len`
/// steps (input plus horizon).
pub fn chrono_split(ds: &Dataset, spec: SplitSpec, min_len: usize) -> Result<[Dataset; 3]> {
    let (a, b, c) = split_lengths(ds.time_count(), spec)?;
    for (name, len) in [("train", a), ("val", b), ("test", c)] {
        if len < min_len {
            return Err(Error::Config(format!(
                "{name} split has {len} steps, fewer than input_len + horizon = {min_len}"
            )));
        }
    }
    Ok([
        ds.slice_time(0, a),
        ds.slice_time(a, b),
        ds.slice_time(a + b, c),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub input: DenseMatrix,
    pub target: DenseMatrix,
    pub anchor: usize,
}

pub fn window_count(time_count: usize, t: usize, tau: usize, stride: usize) -> usize {
    if time_count < t + tau {
        0
    } else {
        (time_count - t - tau) / stride + 1
    }
}

pub fn make_windows(ds: &Dataset, t: usize, tau: usize, stride: usize) -> Vec<WindowSample> {
    let count = window_count(ds.time_count(), t, tau, stride);
    (0..count)
        .map(|j| {
            let anchor = t - 1 + j * stride;
            WindowSample {
                input: ds.values.columns(anchor + 1 - t, anchor + 1),
                target: ds.values.columns(anchor + 1, anchor + 1 + tau),
                anchor,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    LinearSystem,
    PeriodicDiffusion,
}

impl FromStr for SynthMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear-system" => Ok(SynthMode::LinearSystem),
            "periodic-diffusion" => Ok(SynthMode::PeriodicDiffusion),
            _ => Err("expected linear-system or periodic-diffusion".into()),
        }
    }
}

impl std::fmt::Display for SynthMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthMode::LinearSystem => "linear-system",
            SynthMode::PeriodicDiffusion => "periodic-diffusion",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub nodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub mode: SynthMode,
    /// Generator rank (linear-system mode).
    pub rank: usize,
    /// Signal-to-noise power ratio; infinite means noiseless.
    pub snr: f64,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub clean: DenseMatrix,
    /// The evolution matrix (linear-system mode).
    pub generator: Option<DenseMatrix>,
    pub metadata: Vec<(String, String)>,
}

/// Periods and relative amplitudes of the periodic-diffusion harmonics.
pub const HARMONICS: [(f64, f64); 3] = [(24.0, 1.0), (12.0, 0.5), (8.0, 0.3)];

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    if spec.nodes < 2 || spec.steps < 8 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 nodes and 8 steps, got {} and {}",
            spec.nodes, spec.steps
        )));
    }
    if !(spec.snr > 0.0) {
        return Err(Error::Config(format!(
            "synth_snr must be positive, got {}",
            spec.snr
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut metadata = vec![
        ("mode".to_string(), spec.mode.to_string()),
        ("nodes".to_string(), spec.nodes.to_string()),
        ("steps".to_string(), spec.steps.to_string()),
        ("seed".to_string(), spec.seed.to_string()),
    ];
    let (clean, generator) = match spec.mode {
        SynthMode::LinearSystem => {
            let (clean, a) = linear_system(spec, &mut rng)?;
            metadata.push(("rank".to_string(), spec.rank.to_string()));
            (clean, Some(a))
        }
        SynthMode::PeriodicDiffusion => (periodic_diffusion(spec, &mut rng)?, None),
    };

    let mut noisy = clean.clone();
    let mut noise_std = 0.0;
    if spec.snr.is_finite() {
        noise_std = (fluctuation_power(&clean) / spec.snr).sqrt();
        for v in noisy.data_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v += noise_std * g;
        }
    }
    metadata.push(("snr".to_string(), spec.snr.to_string()));
    metadata.push(("noise_std".to_string(), noise_std.to_string()));
    Ok(SynthOutput {
        dataset: Dataset::from_matrix(noisy, "synthetic"),
        clean,
        generator,
        metadata,
    })
}

/// Mean per-node variance around each node's own mean.
fn fluctuation_power(m: &DenseMatrix) -> f64 {
    let n = m.rows();
    let mut total = 0.0;
    for i in 0..n {
        let row = m.row(i);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        total += row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
    }
    total / n as f64
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// x_{t+1} = A x_t with A = P B P^-1, where B holds `rank` stable
/// eigenvalues (rotation blocks plus one real value for odd rank) and
/// zeros elsewhere. x_0 lies in the span of the active eigenvectors.
fn linear_system(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<(DenseMatrix, DenseMatrix)> {
    let (n, r) = (spec.nodes, spec.rank);
    if r == 0 || r > n {
        return Err(Error::Config(format!(
            "synth_rank must be in 1..={n} for {n} nodes, got {r}"
        )));
    }
    let mut b = DenseMatrix::zeros(n, n);
    let mut k = 0;
    while k + 1 < r {
        let rho = rng.random_range(0.95..1.0);
        let theta = rng.random_range(0.15..1.4);
        let (c, s) = (rho * f64::cos(theta), rho * f64::sin(theta));
        b[(k, k)] = c;
        b[(k, k + 1)] = -s;
        b[(k + 1, k)] = s;
        b[(k + 1, k + 1)] = c;
        k += 2;
    }
    if k < r {
        b[(k, k)] = rng.random_range(0.9..1.0);
    }
    let g = normal_matrix(n, n, rng).scale(0.5 / (n as f64).sqrt());
    let p = DenseMatrix::from_fn(n, n, |i, j| g[(i, j)] + if i == j { 1.0 } else { 0.0 });
    let a = p.matmul(&b)?.matmul(&pinv(&p, 1e-12)?)?;
    let coeffs: Vec<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
    let mut x: Vec<f64> = (0..n)
        .map(|i| (0..r).map(|j| p[(i, j)] * coeffs[j]).sum())
        .collect();
    let mut clean = DenseMatrix::zeros(n, spec.steps);
    for t in 0..spec.steps {
        for i in 0..n {
            clean[(i, t)] = x[i];
        }
        x = a.matvec(&x)?;
    }
    Ok((clean, a))
}

/// Ring graph plus random chords; per-node harmonics whose amplitudes and
/// phases are smoothed by the diffusion kernel (I + L)^-1.
fn periodic_diffusion(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<DenseMatrix> {
    let n = spec.nodes;
    let mut adj = DenseMatrix::zeros(n, n);
    let link = |a: usize, b: usize, adj: &mut DenseMatrix| {
        if a != b {
            adj[(a, b)] = 1.0;
            adj[(b, a)] = 1.0;
        }
    };
    for i in 0..n {
        link(i, (i + 1) % n, &mut adj);
    }
    for _ in 0..n / 2 {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        link(a, b, &mut adj);
    }
    let lap = DenseMatrix::from_fn(n, n, |i, j| {
        if i == j {
            (0..n).map(|k| adj[(i, k)]).sum::<f64>() + 1.0
        } else {
            -adj[(i, j)]
        }
    });
    let kernel = pinv(&lap, 1e-12)?;

    let base: Vec<f64> = (0..n)
        .map(|_| 10.0 + 2.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut harmonics = Vec::with_capacity(HARMONICS.len());
    for &(period, scale) in &HARMONICS {
        let amp: Vec<f64> = (0..n).map(|_| scale * rng.random_range(0.5..1.5)).collect();
        let phase: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        // diffusion preserves row sums, so smoothed amplitudes stay positive
        let amp = kernel
            .matvec(&amp)?
            .iter()
            .map(|a| a * 2.0)
            .collect::<Vec<_>>();
        let phase = kernel
            .matvec(&phase)?
            .iter()
            .map(|p| p * 2.0)
            .collect::<Vec<_>>();
        harmonics.push((period, amp, phase));
    }
    Ok(DenseMatrix::from_fn(n, spec.steps, |i, t| {
        base[i]
            + harmonics
                .iter()
                .map(|(period, amp, phase)| {
                    amp[i] * (2.0 * PI * t as f64 / period + phase[i]).sin()
                })
                .sum::<f64>()
    }))
}
