//! Losses, schedules, the three-network update step, the epoch loop and
//! checkpointing.

pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod model;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{config_hash, Checkpoint, CheckpointMeta};
pub use config::{ModelConfig, Precision, Profile, Scheduler, TrainConfig};
pub use losses::{bce, loss_generator, loss_image, loss_story, make_mismatch};
pub use model::{Noise, StoryBatch, StoryGan};
pub use schedule::{schedule_step_decay, schedule_warmup, LrTriple};
pub use trainer::{FitOptions, LossRecord, TrainState, Trainer, LOSS_CSV_HEADER};
