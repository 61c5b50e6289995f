//! Scenario matrices, results persistence and report tables.

pub mod config;
pub mod report;
pub mod results;
pub mod run;

pub use config::{Pair, RunConfig};
pub use report::{build_tables, render, Cell, Format, Table};
pub use results::{read_rows, ResultsRow, ResultsStore, RowKey, RowKind};
pub use run::{evaluate, row_kinds, run_matrix, Evaluation, MatrixSummary, Runner};
