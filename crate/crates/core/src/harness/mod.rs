//! Training loops, configuration, run manifests and the subcommands behind
//! the command-line tool.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod optim;
pub mod train;

pub use commands::{exit_code, run, Command, CommandArgs};
pub use config::{RawConfig, TrainConfig};
pub use manifest::{sha256_hex, RunManifest};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use train::{evaluate, train_stage1, Evaluation, Stage1Log};
