//! Task streams, the training loop, evaluation and reference baselines.

mod baseline;
mod data;
mod eval;
mod experiment;
mod replay;
mod stream;
mod synthetic;
mod train;

pub use baseline::{run_baseline, BaselineKind, BaselineRun, PlainModel};
pub use data::Dataset;
pub use eval::{evaluate, evaluate_class_il, evaluate_task_il, Evaluation, StreamClassifier};
pub use experiment::{run_sparc, train_next, SparcRun};
pub use replay::{reservoir_insert, ReplayBuffer};
pub use stream::{split_dataset, Task, TaskStream};
pub use synthetic::{generate_blobs, BlobSpec};
pub use train::{argmax_row, finalize_task, fit_task, train_task, TrainConfig, TrainReport};
