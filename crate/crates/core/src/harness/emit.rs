//! CSV and JSON output.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::stats::Summary;
use crate::bounds::BoundReport;
use crate::engine::Trajectory;
use crate::error::{Error, Result};
use crate::spectrum::Regime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Diverged,
}

/// Per-cell columns shared by raw and summary rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub experiment_id: String,
    pub regime: Regime,
    pub d: usize,
    pub a: f64,
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(rename = "N")]
    pub steps: usize,
    pub gamma: f64,
    pub eps_d: f64,
    pub eps_l: f64,
    pub eps_p: f64,
    pub eps_a: f64,
    pub eps_o: f64,
}

impl CellMeta {
    pub fn of(cfg: &ExperimentConfig) -> Result<Self> {
        let [eps_d, eps_l, eps_p, eps_a, eps_o] = cfg.quantizers.epsilons();
        Ok(Self {
            experiment_id: cfg.experiment_id()?,
            regime: cfg.quantizers.regime(),
            d: cfg.problem.dim,
            a: cfg.spectrum_exponent(),
            batch: cfg.run.batch,
            steps: cfg.run.steps,
            gamma: cfg.stepsize()?,
            eps_d,
            eps_l,
            eps_p,
            eps_a,
            eps_o,
        })
    }
}

/// One line of `runs.csv`: a checkpoint of one seed of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment_id: String,
    pub seed: u64,
    pub regime: Regime,
    pub d: usize,
    pub a: f64,
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(rename = "N")]
    pub steps: usize,
    pub gamma: f64,
    pub eps_d: f64,
    pub eps_l: f64,
    pub eps_p: f64,
    pub eps_a: f64,
    pub eps_o: f64,
    pub step: usize,
    pub risk_last: Option<f64>,
    pub risk_avg: Option<f64>,
    pub status: Status,
}

pub const RUN_COLUMNS: [&str; 17] = [
    "experiment_id",
    "seed",
    "regime",
    "d",
    "a",
    "B",
    "N",
    "gamma",
    "eps_d",
    "eps_l",
    "eps_p",
    "eps_a",
    "eps_o",
    "step",
    "risk_last",
    "risk_avg",
    "status",
];

impl Row {
    fn new(meta: &CellMeta, seed: u64, step: usize, last: Option<f64>, avg: Option<f64>, status: Status) -> Self {
        Self {
            experiment_id: meta.experiment_id.clone(),
            seed,
            regime: meta.regime,
            d: meta.d,
            a: meta.a,
            batch: meta.batch,
            steps: meta.steps,
            gamma: meta.gamma,
            eps_d: meta.eps_d,
            eps_l: meta.eps_l,
            eps_p: meta.eps_p,
            eps_a: meta.eps_a,
            eps_o: meta.eps_o,
            step,
            risk_last: last,
            risk_avg: avg,
            status,
        }
    }

    /// One row per checkpoint.
    pub fn from_trajectory(meta: &CellMeta, t: &Trajectory) -> Vec<Self> {
        t.risk_last
            .iter()
            .zip(&t.risk_avg)
            .map(|(l, a)| Self::new(meta, t.seed, l.0, Some(l.1), Some(a.1), Status::Ok))
            .collect()
    }

    /// A single row marking the step at which a seed diverged.
    pub fn diverged(meta: &CellMeta, seed: u64, step: usize) -> Self {
        Self::new(meta, seed, step, None, None, Status::Diverged)
    }
}

/// Aggregate of the final averaged-iterate risk of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment_id: String,
    pub regime: Regime,
    pub d: usize,
    pub a: f64,
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(rename = "N")]
    pub steps: usize,
    pub gamma: f64,
    pub eps_d: f64,
    pub eps_l: f64,
    pub eps_p: f64,
    pub eps_a: f64,
    pub eps_o: f64,
    pub n_seeds: usize,
    pub n_diverged: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub iqr: f64,
    pub mean: f64,
    pub stderr: f64,
}

/// Summaries per cell from raw rows, which must be sorted by `(experiment_id, seed, step)`.
///
/// The final risk of a seed is its `risk_avg` at the largest step; diverged seeds are counted, not summarized.
pub fn summarize_rows(rows: &[Row]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let id = &rows[i].experiment_id;
        let mut j = i;
        while j < rows.len() && &rows[j].experiment_id == id {
            j += 1;
        }
        let cell = &rows[i..j];
        let mut finals = Vec::new();
        let mut seeds = 0;
        let mut diverged = 0;
        let mut k = 0;
        while k < cell.len() {
            let seed = cell[k].seed;
            let mut m = k;
            while m < cell.len() && cell[m].seed == seed {
                m += 1;
            }
            seeds += 1;
            let last = &cell[m - 1];
            match (last.status, last.risk_avg) {
                (Status::Ok, Some(r)) => finals.push(r),
                _ => diverged += 1,
            }
            k = m;
        }
        let s = Summary::of(&finals);
        let r = &cell[0];
        out.push(SummaryRow {
            experiment_id: r.experiment_id.clone(),
            regime: r.regime,
            d: r.d,
            a: r.a,
            batch: r.batch,
            steps: r.steps,
            gamma: r.gamma,
            eps_d: r.eps_d,
            eps_l: r.eps_l,
            eps_p: r.eps_p,
            eps_a: r.eps_a,
            eps_o: r.eps_o,
            n_seeds: seeds,
            n_diverged: diverged,
            median: s.median,
            q25: s.q25,
            q75: s.q75,
            iqr: s.iqr,
            mean: s.mean,
            stderr: s.stderr,
        });
        i = j;
    }
    out
}

/// Writes `bytes` to `path` through a temporary file, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_bytes<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
}

/// `runs.csv` contents: header plus one line per row, empty cells for missing risks.
pub fn runs_csv(rows: &[Row]) -> Result<Vec<u8>> {
    csv_bytes(&RUN_COLUMNS, rows)
}

pub fn emit_csv(path: &Path, rows: &[Row]) -> Result<()> {
    write_atomic(path, &runs_csv(rows)?)
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<Row>, _>>()?;
    Ok(rows)
}

pub const SUMMARY_COLUMNS: [&str; 20] = [
    "experiment_id",
    "regime",
    "d",
    "a",
    "B",
    "N",
    "gamma",
    "eps_d",
    "eps_l",
    "eps_p",
    "eps_a",
    "eps_o",
    "n_seeds",
    "n_diverged",
    "median",
    "q25",
    "q75",
    "iqr",
    "mean",
    "stderr",
];

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(SUMMARY_COLUMNS)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
}

/// A bound report as written to `bounds/<experiment_id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundFile {
    pub experiment_id: String,
    pub config_hash: String,
    pub regime: Regime,
    pub report: BoundReport,
}

pub fn emit_bound_report(path: &Path, file: &BoundFile) -> Result<()> {
    let mut text = serde_json::to_string_pretty(file)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
