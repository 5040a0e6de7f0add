//! Experiment configuration and the study drivers behind the CLI: single
//! runs, constant-`vtilde` sweeps, `V1`/`V2` contour grids and the scalar
//! gain-ratio table.
//!
//! Every artifact written here starts with a `# config: {...}` line holding
//! the resolved configuration as one-line JSON.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::VtildeGrid;
use crate::error::{Error, Result};
use crate::kalman::{closed_form_gains, gain_ratio_sequence, VtildeShape};
use crate::metrics::RunSummary;
use crate::model::discretize_integrator;
use crate::pipeline::{default_warmup, run, PipelineConfig, RunOutput, RunRecord, VtildeMode};
use crate::rcie::RcieConfig;
use crate::signals::{generate, load_trace, GapWarning, SignalSpec, TraceSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Differentiation order.
    pub order: usize,
    /// Sampling time; for traces, `None` means the inferred median step.
    #[serde(default)]
    pub ts: Option<f64>,
    /// Measurement-noise variance; `None` means `D2^2` of a generated signal.
    #[serde(default)]
    pub v2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RcieSection {
    pub nc: usize,
    pub nf: usize,
    pub rz: f64,
    pub rd: f64,
    /// `R_theta = r_theta * I`.
    pub r_theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanSection {
    /// Process-noise covariance `V1 = v1 * I`.
    #[serde(default)]
    pub v1: f64,
    #[serde(default)]
    pub vtilde_shape: VtildeShape,
}

impl Default for KalmanSection {
    fn default() -> Self {
        Self { v1: 0.0, vtilde_shape: VtildeShape::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdaptationSection {
    Constant {
        vtilde: f64,
    },
    Adaptive {
        grid: VtildeGrid,
        /// Steps before selection starts; default `max(nf, 10)`.
        #[serde(default)]
        warmup: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SignalSection {
    Generated(SignalSpec),
    Trace {
        /// Relative paths resolve against the config file's directory.
        path: PathBuf,
        #[serde(default)]
        schema: TraceSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub grid: VtildeGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContourSection {
    pub v1_grid: VtildeGrid,
    pub v2_grid: VtildeGrid,
}

impl Default for ContourSection {
    fn default() -> Self {
        let grid = VtildeGrid::LogSpace { lo: 1e-4, hi: 1e-1, count: 20 };
        Self { v1_grid: grid.clone(), v2_grid: grid }
    }
}

/// A complete experiment, as read from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub model: ModelSection,
    pub rcie: RcieSection,
    #[serde(default)]
    pub kalman: KalmanSection,
    pub adaptation: AdaptationSection,
    pub signal: SignalSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contour: Option<ContourSection>,
}

/// Default candidate grid: 100 log-spaced points over `[1e-6, 1e2]` for
/// single and `[1e-6, 1e-2]` for higher-order differentiation.
pub fn default_grid(order: usize) -> VtildeGrid {
    let hi = if order <= 1 { 1e2 } else { 1e-2 };
    VtildeGrid::LogSpace { lo: 1e-6, hi, count: 100 }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads a config file; relative trace paths are made relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if cfg.name.is_empty() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        if let SignalSection::Trace { path: trace, .. } = &mut cfg.signal {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    *trace = dir.join(&*trace);
                }
            }
        }
        Ok(cfg)
    }

    /// One-line JSON echo of the config.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        if let SignalSection::Generated(spec) = &mut self.signal {
            spec.seed = seed;
        }
    }

    /// Grid used by `sweep`: the sweep section, else the adaptive grid, else
    /// the default for the model order.
    pub fn sweep_grid(&self) -> VtildeGrid {
        match (&self.sweep, &self.adaptation) {
            (Some(s), _) => s.grid.clone(),
            (None, AdaptationSection::Adaptive { grid, .. }) => grid.clone(),
            (None, AdaptationSection::Constant { .. }) => default_grid(self.model.order),
        }
    }

    /// Builds the measurement data and the pipeline configuration.
    pub fn resolve(&self) -> Result<Resolved> {
        let (data, signal_ts, d2) = match &self.signal {
            SignalSection::Generated(spec) => {
                if let Some(ts) = self.model.ts {
                    if ts != spec.ts {
                        return Err(Error::config(format!(
                            "model ts {ts} differs from signal ts {}",
                            spec.ts
                        )));
                    }
                }
                let sig = generate(spec, self.model.order)?;
                let data = SignalData { t: sig.t, y: sig.y, d_true: Some(sig.d_true), gaps: Vec::new() };
                (data, spec.ts, Some(sig.d2))
            }
            SignalSection::Trace { path, schema } => {
                let trace = load_trace(path, schema)?;
                let data = SignalData { t: trace.t, y: trace.y, d_true: trace.d_true, gaps: trace.gaps };
                (data, trace.ts, None)
            }
        };
        let ts = self.model.ts.unwrap_or(signal_ts);
        let v2 = match (self.model.v2, d2) {
            (Some(v2), _) => v2,
            (None, Some(d2)) => d2 * d2,
            (None, None) => return Err(Error::config("model.v2 is required for trace input")),
        };
        let model = discretize_integrator(self.model.order, ts, v2)?;
        let r = &self.rcie;
        let rcie = RcieConfig::new(r.nc, r.nf, r.rz, r.rd, r.r_theta)?;
        let mode = match &self.adaptation {
            AdaptationSection::Constant { vtilde } => VtildeMode::Constant(*vtilde),
            AdaptationSection::Adaptive { grid, warmup } => VtildeMode::Adaptive {
                grid: grid.values()?,
                warmup: warmup.unwrap_or_else(|| default_warmup(r.nf)),
            },
        };
        let v1 = self.kalman.v1;
        if !(v1.is_finite() && v1 >= 0.0) {
            return Err(Error::config(format!("kalman.v1 must be >= 0, got {v1}")));
        }
        let n = model.order();
        let pipeline = PipelineConfig {
            v1: DMatrix::identity(n, n) * v1,
            shape: self.kalman.vtilde_shape,
            mode,
            model,
            rcie,
        };
        Ok(Resolved { pipeline, data, d2 })
    }
}

/// Measurements and, when known, the true derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalData {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub d_true: Option<Vec<f64>>,
    pub gaps: Vec<GapWarning>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub pipeline: PipelineConfig,
    pub data: SignalData,
    /// Noise gain of a generated signal.
    pub d2: Option<f64>,
}

impl Resolved {
    pub fn run(&self) -> Result<RunOutput> {
        self.run_with(&self.pipeline)
    }

    fn run_with(&self, cfg: &PipelineConfig) -> Result<RunOutput> {
        run(cfg, &self.data.t, &self.data.y, self.data.d_true.as_deref())
    }

    fn with_mode(&self, mode: VtildeMode) -> PipelineConfig {
        PipelineConfig { mode, ..self.pipeline.clone() }
    }
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::config("--jobs must be >= 1"));
        }
        builder = builder.num_threads(j);
    }
    builder.build().map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

/// Runs `f` over `items` in parallel, keeping input order and reporting the
/// first failure in that order.
fn par_map<T: Sync, U: Send>(
    items: &[T],
    jobs: Option<usize>,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let results: Vec<Result<U>> = pool(jobs)?.install(|| items.par_iter().map(&f).collect());
    results.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub vtilde: f64,
    pub rho_kf: Option<f64>,
    pub s_tilde_kf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index of the smallest `rho_kf`, if `rho` is defined.
    pub argmin_rho: Option<usize>,
    pub argmin_s_tilde: usize,
}

fn argmin(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// One constant-`vtilde` run per grid value, all on the same measurements.
pub fn sweep_vtilde(resolved: &Resolved, grid: &[f64], jobs: Option<usize>) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rows = par_map(&sorted, jobs, |&v| {
        let out = resolved.run_with(&resolved.with_mode(VtildeMode::Constant(v)))?;
        Ok(SweepRow { vtilde: v, rho_kf: out.summary.rho_final, s_tilde_kf: out.summary.s_tilde_final })
    })?;
    let argmin_rho = if rows.iter().all(|r| r.rho_kf.is_some()) {
        argmin(rows.iter().map(|r| r.rho_kf.unwrap_or(f64::INFINITY)))
    } else {
        None
    };
    let argmin_s_tilde = argmin(rows.iter().map(|r| r.s_tilde_kf)).unwrap_or(0);
    Ok(SweepTable { rows, argmin_rho, argmin_s_tilde })
}

/// Error of a run with fixed `V1 = v1 I`, `V2 = v2` and `vtilde = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourCell {
    pub v1: f64,
    pub v2: f64,
    /// rms of `dhat - d` over the whole run.
    pub rmse: f64,
    pub rho_kf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourTable {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    /// Row-major: `cells[i * v2.len() + j]` has `v1[i]`, `v2[j]`.
    pub cells: Vec<ContourCell>,
}

impl ContourTable {
    pub fn cell(&self, i: usize, j: usize) -> &ContourCell {
        &self.cells[i * self.v2.len() + j]
    }

    /// Relative spread `(max - min) / mean` of rmse along each diagonal
    /// `j - i = offset` with at least two cells, keyed by offset.
    pub fn diagonal_spreads(&self) -> Vec<(isize, f64)> {
        let (n1, n2) = (self.v1.len() as isize, self.v2.len() as isize);
        (-(n1 - 1)..n2)
            .filter_map(|off| {
                let vals: Vec<f64> = (0..n1)
                    .filter(|i| (0..n2).contains(&(i + off)))
                    .map(|i| self.cell(i as usize, (i + off) as usize).rmse)
                    .collect();
                (vals.len() >= 2).then(|| (off, relative_spread(&vals)))
            })
            .collect()
    }

    /// Relative spread of rmse across `V2` at each fixed `V1`.
    pub fn row_spreads(&self) -> Vec<f64> {
        (0..self.v1.len())
            .map(|i| {
                let vals: Vec<f64> = (0..self.v2.len()).map(|j| self.cell(i, j).rmse).collect();
                relative_spread(&vals)
            })
            .collect()
    }
}

pub fn relative_spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (max - min) / mean
}

/// Grid of fixed-covariance runs over `V1 x V2` with `vtilde = 0`.
pub fn contour_v1v2(
    resolved: &Resolved,
    v1_grid: &[f64],
    v2_grid: &[f64],
    jobs: Option<usize>,
) -> Result<ContourTable> {
    if v1_grid.is_empty() || v2_grid.is_empty() {
        return Err(Error::config("contour grids must be nonempty"));
    }
    let d_true = resolved
        .data
        .d_true
        .as_deref()
        .ok_or_else(|| Error::config("contour needs the true derivative"))?;
    let pairs: Vec<(f64, f64)> =
        v1_grid.iter().flat_map(|&a| v2_grid.iter().map(move |&b| (a, b))).collect();
    let n = resolved.pipeline.model.order();
    let cells = par_map(&pairs, jobs, |&(v1, v2)| {
        let cfg = PipelineConfig {
            model: resolved.pipeline.model.with_v2(v2)?,
            v1: DMatrix::identity(n, n) * v1,
            mode: VtildeMode::Constant(0.0),
            ..resolved.pipeline.clone()
        };
        let out = resolved.run_with(&cfg)?;
        let sq: f64 = out.records.iter().zip(d_true).map(|(r, d)| (r.dhat - d) * (r.dhat - d)).sum();
        Ok(ContourCell { v1, v2, rmse: (sq / d_true.len() as f64).sqrt(), rho_kf: out.summary.rho_final })
    })?;
    Ok(ContourTable { v1: v1_grid.to_vec(), v2: v2_grid.to_vec(), cells })
}

/// Recursion gains next to the closed forms for `K_1..K_3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRatioRow {
    pub c: f64,
    /// `K_0..=K_kmax` from the recursion.
    pub gains: Vec<f64>,
    /// Closed-form `K_1..K_min(kmax, 3)`.
    pub closed: Vec<f64>,
    pub abs_diff: Vec<f64>,
}

pub fn gain_ratio_table(c_grid: &[f64], kmax: usize) -> Result<Vec<GainRatioRow>> {
    c_grid
        .iter()
        .map(|&c| {
            let gains = gain_ratio_sequence(c, kmax)?;
            let closed: Vec<f64> = closed_form_gains(c).into_iter().take(kmax.min(3)).collect();
            let abs_diff = closed.iter().zip(&gains[1..]).map(|(a, b)| (a - b).abs()).collect();
            Ok(GainRatioRow { c, gains, closed, abs_diff })
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_with_echo(path: &Path, config_json: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let mut out = create(path)?;
    writeln!(out, "# config: {config_json}")?;
    Ok(csv::Writer::from_writer(out))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-step records; undefined values are empty fields.
pub fn write_records(path: &Path, config_json: &str, records: &[RunRecord]) -> Result<()> {
    let mut w = csv_with_echo(path, config_json)?;
    let n = records.first().map_or(0, |r| r.kda.len());
    let mut header: Vec<String> = ["k", "t", "y", "z", "dhat", "d_true", "rho", "vtilde", "s_hat", "s_filter", "s_tilde"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n).map(|i| format!("kda_{i}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.k.to_string(),
            r.t.to_string(),
            r.y.to_string(),
            r.z.to_string(),
            r.dhat.to_string(),
            opt(r.d_true),
            opt(r.rho),
            r.vtilde.to_string(),
            r.s_hat.to_string(),
            r.s_filter.to_string(),
            r.s_tilde.to_string(),
        ];
        row.extend(r.kda.iter().map(|g| g.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep(path: &Path, config_json: &str, table: &SweepTable) -> Result<()> {
    let mut w = csv_with_echo(path, config_json)?;
    w.write_record(["vtilde", "rho_kf", "s_tilde_kf"])?;
    for r in &table.rows {
        w.write_record([r.vtilde.to_string(), opt(r.rho_kf), r.s_tilde_kf.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_contour(path: &Path, config_json: &str, table: &ContourTable) -> Result<()> {
    let mut w = csv_with_echo(path, config_json)?;
    w.write_record(["v1", "v2", "rmse", "rho_kf"])?;
    for c in &table.cells {
        w.write_record([c.v1.to_string(), c.v2.to_string(), c.rmse.to_string(), opt(c.rho_kf)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_gain_ratio(path: &Path, config_json: &str, rows: &[GainRatioRow], kmax: usize) -> Result<()> {
    let mut w = csv_with_echo(path, config_json)?;
    let closed = kmax.min(3);
    let mut header = vec!["c".to_string()];
    header.extend((0..=kmax).map(|k| format!("k{k}")));
    header.extend((1..=closed).map(|k| format!("closed_k{k}")));
    header.extend((1..=closed).map(|k| format!("abs_diff_k{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.c.to_string()];
        row.extend(r.gains.iter().map(|g| g.to_string()));
        row.extend(r.closed.iter().map(|g| g.to_string()));
        row.extend(r.abs_diff.iter().map(|g| g.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON document `{"config": ..., <key>: ...}`.
pub fn write_json<T: Serialize>(path: &Path, config: &ExperimentConfig, key: &str, value: &T) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("config".into(), serde_json::to_value(config)?);
    doc.insert(key.into(), serde_json::to_value(value)?);
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, &serde_json::Value::Object(doc))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Summary of a single run as written by `differentiate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub summary: RunSummary,
    pub ts: f64,
    pub v2: f64,
    pub d2: Option<f64>,
    /// Rows at which the trace time step exceeded 1.5 sampling times.
    pub gap_rows: Vec<usize>,
}

impl RunReport {
    pub fn new(resolved: &Resolved, summary: RunSummary) -> Self {
        Self {
            summary,
            ts: resolved.pipeline.model.ts(),
            v2: resolved.pipeline.model.v2(),
            d2: resolved.d2,
            gap_rows: resolved.data.gaps.iter().map(|g| g.row).collect(),
        }
    }
}
