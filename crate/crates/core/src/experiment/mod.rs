//! Point-mass experiments: configuration, runs with their artifacts, and
//! cross-run comparison.

mod compare;
mod config;
mod run;

pub use compare::{
    Comparison, PairFlags, RunSummary, TAIL_ROWS, compare, load_run, pairwise_csv, summarize, summary_csv,
    tail_mean, write_comparison,
};
pub use config::{ConfigId, ExperimentConfig, ReferenceModel, SCHEDULE_KEYS, default_out_root, noise_name, parse_noise};
pub use run::{
    BAND_METRICS, LEARNING_CURVE, LEARNING_CURVE_HEADER, MANIFEST, RunArtifacts, RunSetup, TD_SAMPLES,
    read_learning_curve, read_matrix_csv, run, setup, write_matrix_csv,
};
