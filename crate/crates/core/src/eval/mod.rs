//! Detection metrics, synthetic benchmarks and end-to-end experiments.

mod experiment;
mod metrics;
mod synth;

pub use experiment::{
    histogram, histogram_csv, histogram_svg, run_experiment, run_experiment_config, Bin, DataPaths,
    ExperimentConfig, ExperimentReport, MeanStd, MethodReport, MethodSummary, SeedReport,
    GR_BASELINE, PGR, PGR_COSINE, PGR_NO_ID, PGR_NO_OOD,
};
pub use metrics::{aupr, auroc, compute_metrics, fpr95, DetectionResult, Metrics};
pub use synth::{synth_dataset, Family, GraphModel, SynthConfig, SynthSplits};
