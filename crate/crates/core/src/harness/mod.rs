//! Config-driven sweeps and their on-disk results.

pub mod config;
pub mod emit;
pub mod stats;
pub mod sweep;

pub use config::{cell_seed, set_path, Axis, Emit, ExperimentConfig, Stepsize};
pub use emit::{read_rows, summarize_rows, Row, Status, SummaryRow, RUN_COLUMNS, SUMMARY_COLUMNS};
pub use stats::Summary;
pub use sweep::{run_cells, run_sweep, SweepOptions, SweepOutcome};
