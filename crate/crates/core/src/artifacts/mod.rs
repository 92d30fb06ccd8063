//! On-disk artifacts: run configuration, checkpoints and metric files.

mod checkpoint;
mod config;
mod metrics;

pub use checkpoint::{
    load_classifier, load_model, save_classifier, save_model, BLOB, FORMAT_VERSION, MANIFEST,
};
pub use config::{parse_kv, RunConfig};
pub use metrics::{
    ablation_csv, histogram_csv, seeds_csv, write_ablation, write_eval, write_seeds,
};
