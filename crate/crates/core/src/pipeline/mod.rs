//! Data handling, training, checkpoints and the batch tools built on them.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod export;
pub mod infer;
pub mod model;
pub mod optim;
pub mod train;

pub use ablate::{ablate, AblationGrid, AblationReport};
pub use checkpoint::{load_checkpoint, resume_checkpoint, save_checkpoint, Checkpoint, Progress};
pub use config::TrainConfig;
pub use data::{write_synthetic_dataset, Dataset, SyntheticSpec};
pub use evaluate::{evaluate_model, label_quality, LabelQuality};
pub use export::export_pseudo_labels;
pub use infer::{infer, infer_dir};
pub use model::{Model, PseudoLabels, StepOutput};
pub use optim::Sgd;
pub use train::{train, LogRow, TrainOptions, TrainRun, Trainer};
