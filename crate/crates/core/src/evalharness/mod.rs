//! Pass@1 evaluation, the experiment runners, and report export.

mod executor;
mod passat1;
mod report;
mod studies;

pub use executor::{
    ExecutionRequest, ExecutionResponse, Executor, MockExecutor, ProtocolTest, ProtocolTestResult, SubprocessExecutor,
};
pub use passat1::{
    extract_code, pass_at_1, pass_rate, ExecutionVerdict, GenerationConfig, TestVerdict, DEFAULT_MAX_NEW_TOKENS,
    DEFAULT_TIMEOUT_MS,
};
pub use report::{
    export_report, import_report, ExperimentReport, ExportedFiles, SeriesPoint, TimingPoint, SERIES_COLUMNS,
    TIMING_COLUMNS,
};
pub use studies::{
    contrast_report, derived_seed, distribution_shift_from_pairs, run_distribution_shift_study, run_main_comparison,
    run_multi_example_study, run_pass_perplexity_contrast, single_example_report, source_target_rows,
    write_csv_rows, write_embeddings_csv, ComparisonConfig, ContrastRow, MultiStudyConfig, ShiftConfig,
    ShiftStudyResult, SourceTargetRow, SpearmanStats, METRIC_DELTA, METRIC_PASS, METRIC_TARGET_PPL,
};
