//! Synthetic tasks, online episodes, sweeps and reports.

pub mod compare;
pub mod episode;
pub mod metrics;
pub mod report;
pub mod task;

pub use compare::{compare, CellOutcome, SummaryRow, SweepConfig, SweepResult};
pub use episode::{
    fast_slow_schedule, run_episode, run_online, EpisodeOptions, EpisodeReport, OnlineRun, RunLabel, Schedule,
};
pub use metrics::{metrics, Metrics};
pub use report::{emit_report, emit_summary, parse_csv_report, parse_json_lines, ReportFormat, ReportRecord, CSV_HEADER};
pub use task::{make_synthetic_task, prepare_task, PreparedTask, Shift, TaskSpec, DEFAULT_HIDDEN, SYNTHETIC_TASK_LR};
