//! Optimization, schedules, checkpoints and the experiment drivers.

mod checkpoint;
mod config;
mod optim;
mod run;

pub use checkpoint::{
    parse_manifest, Checkpoint, CheckpointManifest, ManifestEntry, RngState, TensorKind,
    CHECKPOINT_VERSION,
};
pub use config::TrainConfig;
pub use optim::{lr_schedule, Adam, EarlyStop, Plateau, ADAM_EPS, BETA1, BETA2};
pub use run::{
    evaluate, forward_loss, load_model, log_tsv, predict, run_ablation, train, AblationCell,
    AblationRun, AblationTable, EpochLog, TrainResult, LOG_HEADER,
};
