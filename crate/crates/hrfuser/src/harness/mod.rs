//! Experiment harness: synthetic scenes, dataset assembly, deterministic
//! seeded training with AdamW, evaluation and reporting. The `hrfuser`
//! binary is a thin CLI over this module.

pub mod config;
pub mod gradcheck;
pub mod optim;
pub mod report;
pub mod synth;
pub mod train;

pub use config::{ExperimentConfig, TrainConfig};
pub use report::{read_csv, render_table, write_csv, ReportRow};
pub use synth::{generate_scene, render_camera, scene_ground_truth, SyntheticSceneSpec};
pub use train::{
    build_dataset, evaluate, load_checkpoint, make_sample, rasterize_modality, save_checkpoint,
    train, Dataset, Detector, NormStats, Sample, TrainReport,
};
