//! Reference learners on the same backbone without isolation: sequential
//! fine-tuning (SGD), joint training on all tasks (JOINT) and experience
//! replay with a reservoir buffer (ER).

use std::fmt;
use std::str::FromStr;

use super::eval::{evaluate, Evaluation, StreamClassifier};
use super::replay::ReplayBuffer;
use super::stream::TaskStream;
use super::train::{epoch_batches, TrainConfig};
use crate::error::{Result, SparcError};
use crate::layers::Mode;
use crate::metrics::AccuracyMatrix;
use crate::model::{ArchConfig, SemanticMemory, WorkingMemory};
use crate::rng::substream;
use crate::tensor::{Graph, Sgd, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Sgd,
    Joint,
    Er,
}

impl FromStr for BaselineKind {
    type Err = SparcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(BaselineKind::Sgd),
            "joint" => Ok(BaselineKind::Joint),
            "er" => Ok(BaselineKind::Er),
            other => Err(SparcError::Validation(format!(
                "unknown baseline kind {other:?} (sgd, joint, er)"
            ))),
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Sgd => "sgd",
            BaselineKind::Joint => "joint",
            BaselineKind::Er => "er",
        })
    }
}

/// One backbone of working-memory size with a single head over every class
/// of the stream; the "shared" half is ordinary trainable filters.
#[derive(Debug, Clone)]
pub struct PlainModel {
    pub backbone: WorkingMemory,
    pub shared: SemanticMemory,
    task_classes: Vec<usize>,
    trained: usize,
}

impl PlainModel {
    pub fn new(arch: &ArchConfig, stream: &TaskStream, seed: u64) -> Result<Self> {
        arch.validate()?;
        let total = stream.total_classes();
        if total == 0 {
            return Err(SparcError::Validation("stream has no classes".into()));
        }
        let shared = SemanticMemory::init(&mut substream(seed, "semantic", 0), arch, 1.0);
        let backbone = WorkingMemory::init(&mut substream(seed, "init", 0), arch, total, 0);
        Ok(PlainModel {
            backbone,
            shared,
            task_classes: stream.tasks.iter().map(|t| t.num_classes()).collect(),
            trained: 0,
        })
    }

    pub fn mark_trained(&mut self, tasks: usize) {
        self.trained = tasks;
    }

    /// One SGD step on a batch with concatenated-space labels. Returns the
    /// batch loss.
    pub fn step(&mut self, sgd: &Sgd, x: &Tensor, labels: &[usize]) -> Result<f32> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let logits = self.backbone.forward_train(&mut g, &self.shared.filters, xv)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        g.backward(loss)?;
        let mut params = self.backbone.params_mut();
        params.extend(self.shared.params_mut());
        for p in params.iter_mut() {
            p.zero_grad();
        }
        g.accumulate_grads(params.iter_mut().map(|p| &mut **p));
        sgd.step(&mut params)?;
        Ok(g.value(loss)[0])
    }
}

impl StreamClassifier for PlainModel {
    fn trained_tasks(&self) -> usize {
        self.trained
    }

    /// Logits restricted to the classes of tasks `0..=upto`.
    fn logits_upto(&self, x: &Tensor, upto: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let (y, _) = self.backbone.forward(&mut g, &self.shared.filters, xv, Mode::Eval)?;
        let total: usize = self.task_classes.iter().sum();
        let keep: usize = self.task_classes[..=upto].iter().sum();
        let b = x.shape()[0];
        let out = g.value(y);
        let data = (0..b)
            .flat_map(|r| out[r * total..r * total + keep].iter().copied())
            .collect();
        Tensor::new(vec![b, keep], data)
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub kind: BaselineKind,
    pub class_il: AccuracyMatrix,
    pub task_il: AccuracyMatrix,
    /// Per-epoch mean loss of each training phase (one phase for JOINT).
    pub losses: Vec<Vec<f32>>,
    /// Evaluation after the final stage.
    pub last: Evaluation,
}

/// Stack images and labels into a batch tensor.
fn stack(images: &[&[f32]], shape: [usize; 3]) -> Tensor {
    let data = images.iter().flat_map(|i| i.iter().copied()).collect();
    Tensor::new(vec![images.len(), shape[0], shape[1], shape[2]], data).expect("consistent geometry")
}

pub fn run_baseline(
    kind: BaselineKind,
    arch: &ArchConfig,
    stream: &TaskStream,
    config: &TrainConfig,
    buffer_size: usize,
) -> Result<BaselineRun> {
    config.validate()?;
    let Some(first) = stream.tasks.first() else {
        return Err(SparcError::Validation("empty stream".into()));
    };
    let shape = [first.train.channels, first.train.height, first.train.width];
    let mut model = PlainModel::new(arch, stream, config.seed)?;
    let sgd = Sgd::new(config.learning_rate)?;
    let mut class_il = AccuracyMatrix::new();
    let mut task_il = AccuracyMatrix::new();
    let mut losses = Vec::new();

    if kind == BaselineKind::Joint {
        // Union of all tasks, labels in concatenated space.
        let mut images: Vec<&[f32]> = Vec::new();
        let mut labels = Vec::new();
        for task in &stream.tasks {
            for i in 0..task.train.len() {
                images.push(task.train.image(i));
                labels.push(task.class_offset + task.local_labels(&task.train, &[i])?[0]);
            }
        }
        let mut rng = substream(config.seed, "batch", 0);
        let mut trace = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            let mut sum = 0.0f64;
            for idx in epoch_batches(images.len(), config.batch_size, &mut rng) {
                let x = stack(&idx.iter().map(|&i| images[i]).collect::<Vec<_>>(), shape);
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                sum += f64::from(model.step(&sgd, &x, &y)?) * idx.len() as f64;
            }
            trace.push((sum / images.len().max(1) as f64) as f32);
        }
        losses.push(trace);
        model.mark_trained(stream.len());
        let last = evaluate(&model, stream, stream.len() - 1)?;
        class_il = AccuracyMatrix::single_stage(last.class_il.clone())?;
        task_il = AccuracyMatrix::single_stage(last.task_il.clone())?;
        return Ok(BaselineRun {
            kind,
            class_il,
            task_il,
            losses,
            last,
        });
    }

    let mut buffer: ReplayBuffer<(Vec<f32>, usize)> = ReplayBuffer::new(buffer_size);
    let mut buffer_rng = substream(config.seed, "buffer", 0);
    // ER draws half of each batch from the buffer.
    let new_per_batch = match kind {
        BaselineKind::Er => config.batch_size.div_ceil(2),
        _ => config.batch_size,
    };
    let mut last = None;
    for (t, task) in stream.tasks.iter().enumerate() {
        let mut rng = substream(config.seed, "batch", t as u64);
        let mut trace = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let mut sum = 0.0f64;
            for idx in epoch_batches(task.train.len(), new_per_batch, &mut rng) {
                let local = task.local_labels(&task.train, &idx)?;
                let mut images: Vec<&[f32]> = idx.iter().map(|&i| task.train.image(i)).collect();
                let mut labels: Vec<usize> = local.iter().map(|l| task.class_offset + l).collect();
                let replayed = if kind == BaselineKind::Er {
                    buffer.sample(idx.len(), &mut buffer_rng)
                } else {
                    Vec::new()
                };
                for (img, l) in &replayed {
                    images.push(img);
                    labels.push(*l);
                }
                let x = stack(&images, shape);
                sum += f64::from(model.step(&sgd, &x, &labels)?) * idx.len() as f64;
                // Each sample is offered to the reservoir once, when first seen.
                if kind == BaselineKind::Er && epoch == 0 {
                    for (k, &i) in idx.iter().enumerate() {
                        buffer.insert((task.train.image(i).to_vec(), labels[k]), &mut buffer_rng);
                    }
                }
            }
            trace.push((sum / task.train.len().max(1) as f64) as f32);
        }
        losses.push(trace);
        model.mark_trained(t + 1);
        let e = evaluate(&model, stream, t)?;
        class_il.push_row(e.class_il.clone())?;
        task_il.push_row(e.task_il.clone())?;
        last = Some(e);
    }
    Ok(BaselineRun {
        kind,
        class_il,
        task_il,
        losses,
        last: last.expect("stream is non-empty"),
    })
}
