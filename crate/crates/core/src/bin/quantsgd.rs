use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use quantsgd::bounds::{self, baseline_r0, check_matching_conditions, fp_int_preference, BoundInputs};
use quantsgd::engine::{run_seeds, NoiseStats};
use quantsgd::harness::emit::{emit_bound_report, BoundFile};
use quantsgd::harness::sweep::bound_path;
use quantsgd::harness::{run_cells, run_sweep, ExperimentConfig, SweepOptions};
use quantsgd::quantizers::{data_geometry, label_error_moment};
use quantsgd::risk::decompose;
use quantsgd::{Error, Result};

#[derive(Parser)]
#[command(name = "quantsgd", version, about = "Quantized one-pass SGD for linear regression")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one cell (sweep axes are ignored).
    Simulate {
        /// Overrides `sweep.n_seeds`.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Run every cell of the sweep, skipping finished ones.
    Sweep {
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Upper bound on the excess risk for the config.
    Bound,
    /// Error levels against the full-precision baseline.
    CheckConditions,
    /// Whether FP or INT quantization is preferable at equal bit budgets.
    CompareFpInt {
        #[arg(long)]
        bits: u32,
        #[arg(long)]
        mantissa: u32,
        #[arg(long)]
        dim: usize,
    },
    /// Four-term decomposition of the final averaged-iterate risk.
    Decompose {
        #[arg(long)]
        seeds: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load(g: &Global) -> Result<ExperimentConfig> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

fn sweep_options(g: &Global, seeds: Option<usize>) -> SweepOptions {
    let mut opts = SweepOptions::new(g.out.clone().unwrap_or_else(|| PathBuf::from("out")));
    opts.root_seed = g.seed;
    opts.threads = g.threads;
    opts.n_seeds = seeds;
    opts
}

fn init_threads(g: &Global) -> Result<()> {
    if let Some(t) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RunReport<'a> {
    out: &'a Path,
    cells_run: usize,
    cells_skipped: usize,
    summary: &'a [quantsgd::harness::SummaryRow],
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Simulate { seeds } => {
            let cfg = load(g)?;
            let mut base = cfg.clone();
            if let Some(s) = &mut base.sweep {
                s.axes.clear();
            }
            let cells = base.expand()?;
            let sweep = cfg.sweep_section();
            let opts = sweep_options(g, seeds);
            let n = seeds.unwrap_or(sweep.n_seeds);
            let res = run_cells(&cells, n, &sweep.emit, cfg.run.seed, &opts)?;
            print_json(&RunReport {
                out: &opts.out,
                cells_run: res.cells_run,
                cells_skipped: res.cells_skipped,
                summary: &res.summary,
            })
        }
        Command::Sweep { seeds } => {
            let cfg = load(g)?;
            let opts = sweep_options(g, seeds);
            let res = run_sweep(&cfg, &opts)?;
            print_json(&RunReport {
                out: &opts.out,
                cells_run: res.cells_run,
                cells_skipped: res.cells_skipped,
                summary: &res.summary,
            })
        }
        Command::Bound => {
            init_threads(g)?;
            let cfg = load(g)?;
            let inputs = bound_inputs(&cfg)?;
            let file = BoundFile {
                experiment_id: cfg.experiment_id()?,
                config_hash: cfg.config_hash()?,
                regime: inputs.regime,
                report: bounds::bound(&inputs)?,
            };
            if let Some(out) = &g.out {
                emit_bound_report(&bound_path(out, &file.experiment_id), &file)?;
            }
            print_json(&file)
        }
        Command::CheckConditions => {
            let cfg = load(g)?;
            let inputs = bound_inputs_analytic(&cfg, None)?;
            let r0 = baseline_r0(&inputs.unquantized()?)?;
            print_json(&check_matching_conditions(&inputs, r0)?)
        }
        Command::CompareFpInt { bits, mantissa, dim } => {
            #[derive(Serialize)]
            struct Out {
                bits: u32,
                mantissa: u32,
                dim: usize,
                preference: bounds::Preference,
            }
            let preference = fp_int_preference(bits, mantissa, dim)?;
            print_json(&Out {
                bits,
                mantissa,
                dim,
                preference,
            })
        }
        Command::Decompose { seeds } => {
            init_threads(g)?;
            let cfg = load(g)?;
            let spec = cfg.problem_spec()?;
            let n = seeds.unwrap_or(cfg.sweep_section().n_seeds);
            let runs = run_seeds(&spec, &cfg.quantizers, &cfg.run_config(cfg.run.seed)?, n)?;
            let finals: Vec<Vec<f64>> = runs.into_iter().map(|t| t.final_avg).collect();
            let geom = data_geometry(&spec, &cfg.quantizers.data)?;
            let label = label_error_moment(&spec, &cfg.quantizers.label);
            print_json(&decompose(&finals, &geom, &spec, label)?)
        }
    }
}

fn bound_inputs_analytic(cfg: &ExperimentConfig, noise: Option<NoiseStats>) -> Result<BoundInputs> {
    let b = cfg.bounds_section();
    BoundInputs::from_sites(
        &cfg.problem_spec()?,
        &cfg.quantizers,
        cfg.run.steps,
        cfg.run.batch,
        cfg.stepsize()?,
        b.alpha_b,
        b.sigma_sq,
        noise,
    )
}

/// Analytic inputs when possible, otherwise with noise measured over the configured seeds.
fn bound_inputs(cfg: &ExperimentConfig) -> Result<BoundInputs> {
    match bound_inputs_analytic(cfg, None) {
        Err(Error::Config(_)) => {
            let spec = cfg.problem_spec()?;
            let n = cfg.sweep_section().n_seeds;
            let runs = run_seeds(&spec, &cfg.quantizers, &cfg.run_config(cfg.run.seed)?, n)?;
            let noise = runs.iter().fold(NoiseStats::default(), |acc, t| NoiseStats {
                act_out_sup: acc.act_out_sup.max(t.noise.act_out_sup),
                param_trace_sup: acc.param_trace_sup.max(t.noise.param_trace_sup),
            });
            bound_inputs_analytic(cfg, Some(noise))
        }
        other => other,
    }
}
