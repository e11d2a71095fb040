//! Pipeline orchestration, evaluation with the Match metric, and reports.

mod config;
mod eval;
mod metric;
mod pipeline;

pub use config::{EvalConfig, PipelineConfig};
pub use eval::{evaluate, generate_answers, tally, EvalReport, Generation, Generator, Split, Tally};
pub use metric::{is_no_evidence, match_metric};
pub use pipeline::{Ablation, Pipeline, RunDir};
