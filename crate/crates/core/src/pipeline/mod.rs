//! Data, training, evaluation and inference plumbing.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod objective;
pub mod train;

pub use bench::{bench_attend_pool, BenchConfig, BenchReport};
pub use checkpoint::{CheckpointMeta, RngState};
pub use config::{load_config, RunConfig};
pub use data::{synth_dataset, DatasetManifest, Sample};
pub use eval::{evaluate, infer, predict_maps, InferOutput};
pub use objective::{objective, Objective};
pub use train::{train, LogRow, Precision, TrainConfig, TrainOutcome};
