//! Training loop, evaluation, parameter sweeps, ablations, and volume tables.

mod config;
mod experiments;
mod train;

pub use config::{parse_key_values, TrainConfig};
pub use experiments::{
    ablate, sweep, to_csv, volume_table, AblationRow, CsvRow, SweepParam, SweepRow, VolumeRow, BENCHMARK_DIMS,
    BENCHMARK_LATENT_DIM,
};
pub use train::{
    evaluate, fixture, init_model, load_models, save_models, scene_loss, train, Adam, EpochLoss, ModeScore, PreparedScene,
    RunRecord, SceneLoss, TrainOutput,
};
