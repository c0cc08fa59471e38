//! Task-IL and Class-IL evaluation.
//!
//! Both views are read off one matrix of concatenated logits: Task-IL takes
//! the argmax within the sample's own task range, Class-IL the argmax over
//! every class seen so far. Ties resolve to the lowest index.

use super::stream::TaskStream;
use super::train::argmax_row;
use crate::error::{Result, SparcError};
use crate::model::SparcModel;
use crate::tensor::Tensor;

/// Samples per evaluation forward pass. Eval-mode outputs are per-sample,
/// so the chunk size does not affect results.
const EVAL_CHUNK: usize = 128;

/// A classifier whose outputs over the stream's concatenated class space
/// can be queried after training tasks `0..=upto`.
pub trait StreamClassifier {
    /// Number of tasks trained so far.
    fn trained_tasks(&self) -> usize;

    /// Eval-mode logits `[B, classes of tasks 0..=upto]`.
    fn logits_upto(&self, x: &Tensor, upto: usize) -> Result<Tensor>;
}

impl StreamClassifier for SparcModel {
    fn trained_tasks(&self) -> usize {
        self.num_tasks()
    }

    /// Every sub-network runs with its own batch norm; heads are
    /// concatenated in task order.
    fn logits_upto(&self, x: &Tensor, upto: usize) -> Result<Tensor> {
        let b = x.shape()[0];
        let parts = (0..=upto).map(|t| self.task_logits(t, x)).collect::<Result<Vec<_>>>()?;
        let width: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(b * width);
        for r in 0..b {
            for p in &parts {
                let c = p.shape()[1];
                data.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
            }
        }
        Tensor::new(vec![b, width], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Task-IL accuracy (percent) per task `0..=upto`.
    pub task_il: Vec<f64>,
    /// Class-IL accuracy (percent) per originating task.
    pub class_il: Vec<f64>,
    /// Class-IL accuracy over all evaluated samples.
    pub class_il_overall: f64,
    /// Task owning the Class-IL prediction of every evaluated sample.
    pub predicted_tasks: Vec<usize>,
}

/// Evaluate on the test sets of tasks `0..=upto`.
pub fn evaluate<M: StreamClassifier + ?Sized>(model: &M, stream: &TaskStream, upto: usize) -> Result<Evaluation> {
    if upto >= stream.len() {
        return Err(SparcError::Lookup(format!(
            "task {upto} not in a stream of {}",
            stream.len()
        )));
    }
    if upto >= model.trained_tasks() {
        return Err(SparcError::State(format!(
            "task {upto} has not been trained ({} trained)",
            model.trained_tasks()
        )));
    }
    let width = stream.classes_upto(upto);
    // Owning task of every concatenated class slot.
    let owner: Vec<usize> = stream.tasks[..=upto]
        .iter()
        .enumerate()
        .flat_map(|(t, task)| std::iter::repeat_n(t, task.num_classes()))
        .collect();
    let mut task_il = Vec::with_capacity(upto + 1);
    let mut class_il = Vec::with_capacity(upto + 1);
    let mut predicted_tasks = Vec::new();
    let (mut all_correct, mut all_total) = (0usize, 0usize);
    for task in &stream.tasks[..=upto] {
        let data = &task.test;
        let (mut til, mut cil) = (0usize, 0usize);
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(EVAL_CHUNK) {
            let logits = model.logits_upto(&data.batch(chunk), upto)?;
            let local = task.local_labels(data, chunk)?;
            for (r, l) in local.iter().enumerate() {
                let row = &logits.data()[r * width..(r + 1) * width];
                let own = &row[task.class_offset..task.class_offset + task.num_classes()];
                til += usize::from(argmax_row(own) == *l);
                let global = argmax_row(row);
                cil += usize::from(global == task.class_offset + l);
                predicted_tasks.push(owner[global]);
            }
        }
        let pct = |c: usize| {
            if data.is_empty() {
                0.0
            } else {
                100.0 * c as f64 / data.len() as f64
            }
        };
        task_il.push(pct(til));
        class_il.push(pct(cil));
        all_correct += cil;
        all_total += data.len();
    }
    Ok(Evaluation {
        task_il,
        class_il,
        class_il_overall: if all_total == 0 {
            0.0
        } else {
            100.0 * all_correct as f64 / all_total as f64
        },
        predicted_tasks,
    })
}

pub fn evaluate_task_il<M: StreamClassifier + ?Sized>(model: &M, stream: &TaskStream, upto: usize) -> Result<Vec<f64>> {
    Ok(evaluate(model, stream, upto)?.task_il)
}

/// Per-task Class-IL accuracies and the overall accuracy.
pub fn evaluate_class_il<M: StreamClassifier + ?Sized>(
    model: &M,
    stream: &TaskStream,
    upto: usize,
) -> Result<(Vec<f64>, f64)> {
    let e = evaluate(model, stream, upto)?;
    Ok((e.class_il, e.class_il_overall))
}
