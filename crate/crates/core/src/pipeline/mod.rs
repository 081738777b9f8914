//! End-to-end registration, training, datasets and evaluation.

pub mod dataset;
pub mod evaluate;
pub mod metrics;
pub mod register;
pub mod train;

pub use dataset::{make_dataset, Dataset, DatasetCase, DatasetConfig};
pub use evaluate::{
    ablation_grid, ablation_mpd, ablation_run, register_case, register_cases, AblationConfig,
    AblationResult, TrackerKind,
};
pub use metrics::{mpd, mtre, percentile, summarize, MetricsSummary, GROSS_FAILURE_MM};
pub use register::{
    eval_metrics, register, NetworkTracker, OracleTracker, RegisterInput, Registration,
    RegistrationRecord, Tracker,
};
pub use train::{train, train_stage, LossCurveRow, Stage, TrainConfig, TrainOutput};
