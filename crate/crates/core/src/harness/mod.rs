//! Desk-scale data, optimization and the scan ablation.

mod ablation;
mod dataset;
mod optim;
mod train;

pub use ablation::{ablation_run, median, AblationBudget, AblationReport, AblationRow, ARMS};
pub use dataset::{generate_dataset, DatasetSpec, SyntheticDataset, GLYPHS};
pub use optim::{decays, lr_at, AdamW};
pub use train::{evaluate, resume, train, MetricRow, Split, TrainConfig, TrainState, METRICS_HEADER};
