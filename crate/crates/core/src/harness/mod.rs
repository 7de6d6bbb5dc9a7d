//! Experiment orchestration: configuration, warm-up caching, the sensitivity
//! and plateau runners, latent-property reports, re-analysis of saved
//! curves, and results emission.

mod analyze;
mod cache;
pub mod config;
mod latents;
mod report;
mod run;

pub use analyze::{analyze_run, AnalyzeParams};
pub use cache::{warmup, Warmup, WarmupStats};
pub use config::{
    AutoOr, ExperimentConfig, ExperimentKind, ExperimentSection, FilesSection, SweepSection,
    TargetKind,
};
pub use latents::{
    latent_property_report, write_latent_report, Histogram, LatentPropertyReport,
    DEFAULT_REPORT_SAMPLES, NORM_FRACTION_RANKS,
};
pub use report::{
    read_results_csv, results_csv_name, write_plot_data, write_results_csv, write_results_json,
    CurveKind, ResultsTable, TableRow, PLOT_BIN_WIDTH,
};
pub use run::{job_rng, run, run_plateau, run_sensitivity, Purpose, RunSummary};
