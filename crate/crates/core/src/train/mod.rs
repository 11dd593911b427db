//! Optimiser, schedule, checkpoints, weight transfer and training loops.

pub mod adamw;
pub mod checkpoint;
pub mod loops;
pub mod pipeline;
pub mod schedule;
pub mod transfer;

pub use adamw::{Counters, TrainState};
pub use checkpoint::{BestRecord, Checkpoint, CheckpointKind, MetricRecord};
pub use loops::{run_finetune, run_pretrain, FinetuneConfig, FinetuneRun, PretrainConfig, PretrainRun};
pub use transfer::{transfer_encoder, Disposition, TransferReport};
