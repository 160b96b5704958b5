//! Configuration, orchestration and persistence around a simulation run.

mod config;
mod execute;
mod persist;

pub use config::{
    config_hash, parse_config_str, parse_noise_flag, parse_partition_flag, preset, resolve,
    ConfigInput, DatasetSource, NoiseSpec, PlaneSpec, ResolvedConfig, RunConfig,
    DEFAULT_PERSONALIZATION_FRACTION, PRESETS,
};
pub use execute::{
    default_out_dir, eval_plan, execute, execute_in, initial_global, load_dataset, prepare,
    probe_plane, DataSummary, FinalMetrics, NoiseReport, PreparedData, Reductions, RunReport,
    Summary, OUT_ROOT_ENV,
};
pub use persist::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, write_json,
    write_plane_csv, write_rounds_csv, write_sweep_csv, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
