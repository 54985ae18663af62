//! Closed-loop evaluation, model comparison, layer ablation and reports.

mod eval;
mod report;
mod rollout;

pub use eval::{
    ablate_layers, compare, evaluate, evaluate_policy, model_name, rollout_cameras, rollout_seed, EvalSettings,
    ABLATION_MODES,
};
pub use report::{
    parse_eval_csv, rate_ratio, success_rate, write_report, AblationReport, AblationRow, CompareReport, CompareRow,
    EvalReport, Report, ReportFormat, TaskResult, REPORT_SCHEMA_VERSION,
};
pub use rollout::{rollout, Controller, ExpertController, PolicyController, Rollout, DEFAULT_MAX_STEPS};
