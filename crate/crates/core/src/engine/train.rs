//! The per-task training loop and the end-of-task sequence
//! (freeze, head re-normalization, consolidation).

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use super::stream::Task;
use crate::error::{Result, SparcError};
use crate::layers::Mode;
use crate::model::{ActivationRecord, RenormOutcome, SparcModel};
use crate::rng::substream;
use crate::tensor::{Graph, Sgd};

/// Optimization settings shared by SPARC and the baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Target activation scale for head re-normalization.
    pub kappa: f32,
    /// Skip head re-normalization (ablation).
    pub renormalize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            batch_size: 32,
            epochs: 50,
            kappa: 5.0,
            renormalize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SparcError::Validation(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(SparcError::Validation("batch size and epochs must be positive".into()));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(SparcError::Validation(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Sample-weighted mean loss of each epoch.
    pub losses: Vec<f32>,
    /// Train-mode accuracy (fraction) of each epoch.
    pub train_accuracy: Vec<f64>,
    /// Per-sample maximum logit seen during the final epoch.
    pub activations: ActivationRecord,
    pub duration: Duration,
    pub seed: u64,
    /// Outcome of head re-normalization; `None` when disabled.
    pub renorm: Option<RenormOutcome>,
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch index lists for one epoch.
pub(crate) fn epoch_batches<R: rand::Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Run the gradient epochs for task `t` without the end-of-task sequence.
pub fn fit_task(model: &mut SparcModel, t: usize, task: &Task, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if task.train.is_empty() {
        return Err(SparcError::Validation(format!("task {t} has no training data")));
    }
    if t + 1 != model.num_tasks() {
        return Err(SparcError::State(format!(
            "only the newest task ({}) can be trained, not {t}",
            model.num_tasks().saturating_sub(1)
        )));
    }
    if model.task(t)?.is_frozen() {
        return Err(SparcError::State(format!("task {t} is frozen")));
    }
    if let Some(p) = (0..t).find(|p| !model.tasks()[*p].is_frozen()) {
        return Err(SparcError::State(format!("earlier task {p} is not frozen")));
    }
    if model.task(t)?.num_classes() != task.num_classes() {
        return Err(SparcError::Validation(format!(
            "task {t} head has {} classes, data has {}",
            model.task(t)?.num_classes(),
            task.num_classes()
        )));
    }
    let start = Instant::now();
    let sgd = Sgd::new(config.learning_rate)?;
    let mut rng = substream(config.seed, "batch", t as u64);
    let mut losses = Vec::with_capacity(config.epochs);
    let mut train_accuracy = Vec::with_capacity(config.epochs);
    let mut activations = ActivationRecord::new();
    for epoch in 0..config.epochs {
        let last = epoch + 1 == config.epochs;
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in epoch_batches(task.train.len(), config.batch_size, &mut rng) {
            let labels = task.local_labels(&task.train, &idx)?;
            let mut g = Graph::new();
            let x = g.input(&task.train.batch(&idx));
            let logits = model.forward_task(&mut g, t, x, Mode::Train)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            loss_sum += f64::from(g.value(loss)[0]) * idx.len() as f64;
            let c = task.num_classes();
            let out = g.value(logits);
            correct += labels
                .iter()
                .enumerate()
                .filter(|(i, l)| argmax_row(&out[i * c..(i + 1) * c]) == **l)
                .count();
            if last {
                activations.record(&g.to_tensor(logits))?;
            }
            let mut params = model.trainable_params_mut(t)?;
            for p in params.iter_mut() {
                p.zero_grad();
            }
            g.accumulate_grads(params.iter_mut().map(|p| &mut **p));
            sgd.step(&mut params)?;
        }
        losses.push((loss_sum / task.train.len() as f64) as f32);
        train_accuracy.push(correct as f64 / task.train.len() as f64);
    }
    Ok(TrainReport {
        losses,
        train_accuracy,
        activations,
        duration: start.elapsed(),
        seed: config.seed,
        renorm: None,
    })
}

/// Freeze task `t`, re-normalize its head from `record`, then consolidate
/// its filters into the shared banks (from the second task on).
pub fn finalize_task(
    model: &mut SparcModel,
    t: usize,
    record: &ActivationRecord,
    config: &TrainConfig,
) -> Result<Option<RenormOutcome>> {
    model.freeze_task(t)?;
    let outcome = if config.renormalize {
        Some(model.renormalize_task_head(t, record, config.kappa)?)
    } else {
        None
    };
    if t >= 1 {
        model.consolidate_semantic(t)?;
    }
    Ok(outcome)
}

/// Train the newest task end to end.
pub fn train_task(model: &mut SparcModel, t: usize, task: &Task, config: &TrainConfig) -> Result<TrainReport> {
    let start = Instant::now();
    let mut report = fit_task(model, t, task, config)?;
    report.renorm = finalize_task(model, t, &report.activations, config)?;
    report.duration = start.elapsed();
    Ok(report)
}
