//! End-to-end runs, evaluation and reporting.

mod config;
mod eval;
mod report;
mod run;

pub use config::{DataSource, Mode, RunConfig};
pub use eval::{diagnostics, evaluate_samples, Diagnostics};
pub use report::{read_scorematrix, report, scorematrix_csv};
pub use run::{load_stream, stream_vocabulary, train, FreezeAudit, RunOutcome, PARTIAL_MARKER};
