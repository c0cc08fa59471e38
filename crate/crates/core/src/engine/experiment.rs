//! A full SPARC run over a task stream: allocate, train and finalize each
//! task in order, evaluating after every stage.

use super::eval::{evaluate, Evaluation};
use super::stream::TaskStream;
use super::train::{train_task, TrainConfig, TrainReport};
use crate::error::{Result, SparcError};
use crate::metrics::AccuracyMatrix;
use crate::model::{task_bytes, ArchConfig, SparcModel};

#[derive(Debug, Clone)]
pub struct SparcRun {
    pub model: SparcModel,
    pub class_il: AccuracyMatrix,
    pub task_il: AccuracyMatrix,
    pub reports: Vec<TrainReport>,
    /// Head norms after each task's gradient training, before rescaling.
    pub head_norms_before: Vec<f64>,
    /// Head norms of the final model.
    pub head_norms_after: Vec<f64>,
    /// Serialized working memory of each task right after it was finalized.
    pub frozen_snapshots: Vec<Vec<u8>>,
    /// Evaluation after the final stage.
    pub last: Evaluation,
}

pub fn run_sparc(arch: &ArchConfig, alpha: f32, stream: &TaskStream, config: &TrainConfig) -> Result<SparcRun> {
    if stream.is_empty() {
        return Err(SparcError::Validation("empty stream".into()));
    }
    let mut model = SparcModel::new(arch.clone(), alpha, config.seed)?;
    let mut class_il = AccuracyMatrix::new();
    let mut task_il = AccuracyMatrix::new();
    let mut reports = Vec::with_capacity(stream.len());
    let mut head_norms_before = Vec::with_capacity(stream.len());
    let mut frozen_snapshots = Vec::with_capacity(stream.len());
    let mut last = None;
    for (t, task) in stream.tasks.iter().enumerate() {
        let allocated = model.allocate_working_memory(task.num_classes(), config.seed)?;
        debug_assert_eq!(allocated, t);
        let mut report = super::train::fit_task(&mut model, t, task, config)?;
        head_norms_before.push(model.task(t)?.head.weight_norm());
        report.renorm = super::train::finalize_task(&mut model, t, &report.activations, config)?;
        frozen_snapshots.push(task_bytes(&model, t)?);
        reports.push(report);
        let e = evaluate(&model, stream, t)?;
        class_il.push_row(e.class_il.clone())?;
        task_il.push_row(e.task_il.clone())?;
        last = Some(e);
    }
    let head_norms_after = model.head_l2_norms();
    Ok(SparcRun {
        model,
        class_il,
        task_il,
        reports,
        head_norms_before,
        head_norms_after,
        frozen_snapshots,
        last: last.expect("stream is non-empty"),
    })
}

/// Convenience used when the caller already holds an allocated model.
pub fn train_next(model: &mut SparcModel, stream: &TaskStream, config: &TrainConfig) -> Result<TrainReport> {
    let t = model.num_tasks();
    let task = stream
        .tasks
        .get(t)
        .ok_or_else(|| SparcError::Lookup(format!("stream has no task {t}")))?;
    model.allocate_working_memory(task.num_classes(), config.seed)?;
    train_task(model, t, task, config)
}
