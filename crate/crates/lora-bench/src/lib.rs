//! Seeded sweeps comparing constructed low-rank adapters against trained ones,
//! with CSV rows, JSON run manifests and per-run loss curves.

pub mod config;
pub mod emit;
pub mod experiments;
pub mod model_file;
pub mod models;

pub use config::{ExperimentConfig, ExperimentKind, Method, ModelKind, Task, Variant};
pub use emit::{ResultRow, RunManifest};
pub use experiments::{run_sweep, Cell, SweepOutcome};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Model(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Construct(#[from] lora_construct::Error),
}
