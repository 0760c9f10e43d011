//! Scenario files, repeated runs and reports.

pub mod cost;
pub mod experiment;
pub mod scenario;

pub use cost::{cost_report, cost_report_text, CostReport, CostRow};
pub use experiment::{
    compare_topologies, mean_std, run_label, run_scenario, summarize, write_csv, write_outputs, ComparisonRow,
    MetricsRecord, RunOptions, RunOutput, SummaryRow,
};
pub use scenario::{load_scenario, parse_scenario, Scenario, ScenarioError, DEFAULT_REPS};
