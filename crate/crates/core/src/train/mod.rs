//! Optimization loop, configuration, checkpoints and translation of image folders.

mod adam;
pub mod checkpoint;
mod config;
mod eval;
mod models;
mod trainer;
mod translate;

pub use adam::{adam_step, AdamState};
pub use config::{lr_at, sidecar_path, Mode, PhantomConfig, TrainConfig};
pub use eval::{evaluate, temporal_error, translate_stack, Evaluation};
pub use models::{Direction, Generators, Models};
pub use trainer::{load_data, train, write_log_line, StepLog, Trainer};
pub use translate::{load_models, translate_dir};
