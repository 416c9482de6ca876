//! Parallel execution of sweep cells with per-cell checkpoint files.
//!
//! Layout under the output directory:
//!
//! ```text
//! cells/<experiment_id>.csv    raw rows of one finished cell
//! bounds/<experiment_id>.json  bound report, when requested
//! runs.csv, summary.csv        all cells, rebuilt at the end of every run
//! summary.json
//! ```
//!
//! A cell's CSV is written last, so its presence means the cell is complete
//! and a rerun skips it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;

use super::config::{cell_seed, Emit, ExperimentConfig};
use super::emit::{
    emit_bound_report, emit_csv, read_rows, summarize_rows, summary_csv, write_atomic, BoundFile, CellMeta, Row,
    SummaryRow,
};
use crate::bounds::{bound, BoundInputs};
use crate::engine::{run_trajectory, NoiseStats, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub out: PathBuf,
    /// Root of all cell seeds; defaults to `run.seed` of the config.
    pub root_seed: Option<u64>,
    /// Worker threads; rayon's default when `None`.
    pub threads: Option<usize>,
    /// Overrides `sweep.n_seeds`.
    pub n_seeds: Option<usize>,
}

impl SweepOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            root_seed: None,
            threads: None,
            n_seeds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells_run: usize,
    pub cells_skipped: usize,
    pub rows: Vec<Row>,
    pub summary: Vec<SummaryRow>,
}

pub fn cell_path(out: &Path, id: &str) -> PathBuf {
    out.join("cells").join(format!("{id}.csv"))
}

pub fn bound_path(out: &Path, id: &str) -> PathBuf {
    out.join("bounds").join(format!("{id}.json"))
}

/// Expands `cfg` and runs every cell that has no checkpoint file yet.
pub fn run_sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<SweepOutcome> {
    let cells = cfg.expand()?;
    let sweep = cfg.sweep_section();
    let n_seeds = opts.n_seeds.unwrap_or(sweep.n_seeds);
    run_cells(&cells, n_seeds, &sweep.emit, opts.root_seed.unwrap_or(cfg.run.seed), opts)
}

struct Cell<'a> {
    cfg: &'a ExperimentConfig,
    id: String,
    meta: CellMeta,
    base_seed: u64,
}

enum Outcome {
    Done(Box<Trajectory>),
    Diverged(usize),
}

/// Runs `n_seeds` trials of each cell. Cells with identical ids run once.
pub fn run_cells(
    cells: &[ExperimentConfig],
    n_seeds: usize,
    emit: &[Emit],
    root_seed: u64,
    opts: &SweepOptions,
) -> Result<SweepOutcome> {
    if n_seeds == 0 {
        return Err(Error::NotEnoughSeeds { needed: 1, got: 0 });
    }
    let mut unique: BTreeMap<String, Cell> = BTreeMap::new();
    for cfg in cells {
        let id = cfg.experiment_id()?;
        if !unique.contains_key(&id) {
            unique.insert(
                id.clone(),
                Cell {
                    cfg,
                    meta: CellMeta::of(cfg)?,
                    base_seed: cell_seed(root_seed, &id),
                    id,
                },
            );
        }
    }
    let (todo, done): (Vec<&Cell>, Vec<&Cell>) = unique
        .values()
        .partition(|c| !cell_path(&opts.out, &c.id).exists());

    let tasks: Vec<(usize, u64)> = (0..todo.len())
        .flat_map(|c| (0..n_seeds as u64).map(move |k| (c, k)))
        .collect();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = opts.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| Error::Config(e.to_string()))?;

    let (tx, rx) = mpsc::channel::<(usize, u64, Result<Outcome>)>();
    std::thread::scope(|scope| -> Result<()> {
        let writer = scope.spawn(|| write_cells(&todo, n_seeds, emit, &opts.out, rx));
        pool.install(|| {
            tasks.par_iter().for_each_with(tx, |tx, &(c, k)| {
                let cell = todo[c];
                let seed = cell.base_seed.wrapping_add(k);
                let res = cell
                    .cfg
                    .run_config(seed)
                    .and_then(|rc| run_trajectory(&cell.cfg.problem_spec()?, &cell.cfg.quantizers, &rc));
                let res = match res {
                    Ok(t) => Ok(Outcome::Done(Box::new(t))),
                    Err(Error::Diverged { step, .. }) => Ok(Outcome::Diverged(step)),
                    Err(e) => Err(e),
                };
                // The writer only hangs up after an error it will report.
                let _ = tx.send((c, k, res));
            })
        });
        writer.join().expect("writer thread panicked")
    })?;

    let mut rows = Vec::new();
    for cell in unique.values() {
        rows.extend(read_rows(&cell_path(&opts.out, &cell.id))?);
    }
    rows.sort_by(|a, b| (&a.experiment_id, a.seed, a.step).cmp(&(&b.experiment_id, b.seed, b.step)));
    let summary = summarize_rows(&rows);
    if emit.contains(&Emit::Csv) {
        emit_csv(&opts.out.join("runs.csv"), &rows)?;
        write_atomic(&opts.out.join("summary.csv"), &summary_csv(&summary)?)?;
    }
    if emit.contains(&Emit::Json) {
        let mut text = serde_json::to_string_pretty(&summary)?;
        text.push('\n');
        write_atomic(&opts.out.join("summary.json"), text.as_bytes())?;
    }
    Ok(SweepOutcome {
        cells_run: todo.len(),
        cells_skipped: done.len(),
        rows,
        summary,
    })
}

fn write_cells(
    cells: &[&Cell],
    n_seeds: usize,
    emit: &[Emit],
    out: &Path,
    rx: mpsc::Receiver<(usize, u64, Result<Outcome>)>,
) -> Result<()> {
    let mut pending: Vec<Vec<Option<Outcome>>> = cells.iter().map(|_| (0..n_seeds).map(|_| None).collect()).collect();
    let mut received = vec![0usize; cells.len()];
    for (c, k, res) in rx {
        pending[c][k as usize] = Some(res?);
        received[c] += 1;
        if received[c] == n_seeds {
            let outcomes: Vec<Outcome> = pending[c].iter_mut().map(|o| o.take().expect("all seeds received")).collect();
            finish_cell(cells[c], &outcomes, emit, out)?;
        }
    }
    Ok(())
}

fn finish_cell(cell: &Cell, outcomes: &[Outcome], emit: &[Emit], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    let mut noise = NoiseStats::default();
    for (k, o) in outcomes.iter().enumerate() {
        match o {
            Outcome::Done(t) => {
                rows.extend(Row::from_trajectory(&cell.meta, t));
                noise.act_out_sup = noise.act_out_sup.max(t.noise.act_out_sup);
                noise.param_trace_sup = noise.param_trace_sup.max(t.noise.param_trace_sup);
            }
            Outcome::Diverged(step) => {
                rows.push(Row::diverged(&cell.meta, cell.base_seed.wrapping_add(k as u64), *step));
            }
        }
    }
    if emit.contains(&Emit::Bounds) {
        let cfg = cell.cfg;
        let b = cfg.bounds_section();
        let inputs = BoundInputs::from_sites(
            &cfg.problem_spec()?,
            &cfg.quantizers,
            cfg.run.steps,
            cfg.run.batch,
            cfg.stepsize()?,
            b.alpha_b,
            b.sigma_sq,
            Some(noise),
        )?;
        let file = BoundFile {
            experiment_id: cell.id.clone(),
            config_hash: cfg.config_hash()?,
            regime: inputs.regime,
            report: bound(&inputs)?,
        };
        emit_bound_report(&bound_path(out, &cell.id), &file)?;
    }
    emit_csv(&cell_path(out, &cell.id), &rows)
}
