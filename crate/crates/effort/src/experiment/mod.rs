//! Synthetic data, optimization, the fine-tuning loop, metrics and sweeps.

pub mod adam;
pub mod config;
pub mod data;
pub mod metrics;
pub mod report;
pub mod sweep;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::ExperimentConfig;
pub use data::{gen_dataset, Dataset, FakeFamily, FakeMethod, Split, SplitSizes, SyntheticSpec};
pub use metrics::{accuracy_at_half, roc_auc};
pub use sweep::{rank_sweep, seed_protocol, SweepRow, Variant};
pub use train::{evaluate, finetune, pretrain, train, EvalSets, ExperimentReport, PretrainConfig, Regime, TrainConfig};
