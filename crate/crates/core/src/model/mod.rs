//! The SPARC continual model: per-task working memories, the shared
//! semantic memory, and the lifecycle operations tying them together.

mod census;
mod checkpoint;
mod renorm;

pub use census::{analytic_census, dense_conv_params, dsc_unit_params, ParamCensus};
pub use checkpoint::{load_model, model_from_bytes, model_to_bytes, save_model, task_bytes};
pub use renorm::{quartile, renormalize_head, ActivationRecord, RenormOutcome};

use rand::Rng;

use crate::error::{Result, SparcError};
use crate::layers::{gaussian, ClassifierHead, Mode, ResidualBlock, Shortcut, SplitDscUnit, TaskBatchNorm};
use crate::rng::substream;
use crate::tensor::{BatchMoments, Graph, Tensor, Var};

/// Per-layer channel counts at width factor 1.
pub const BASE_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortcutKind {
    /// Strided subsampling with zero channel padding (no parameters).
    Pad,
    /// Task-specific strided pointwise projection.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Isolation {
    /// Half of every pointwise bank is task-specific, half is shared.
    Split,
    /// Every pointwise filter is task-specific; nothing is shared.
    Complete,
}

/// Backbone topology shared by every working memory of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// Channels per layer (depthwise filters per task per layer).
    pub widths: Vec<usize>,
    pub blocks_per_layer: usize,
    pub kernel: usize,
    pub shortcut: ShortcutKind,
    pub isolation: Isolation,
}

impl ArchConfig {
    /// Widths `64 * 2^l * width_factor` for `l < depth`, rounded to an even
    /// count of at least 2.
    pub fn from_width(width_factor: f64, depth: usize, in_channels: usize) -> Result<Self> {
        if width_factor.is_nan() || width_factor <= 0.0 || depth == 0 {
            return Err(SparcError::Validation(format!(
                "width factor must be > 0 and depth >= 1 (got {width_factor}, {depth})"
            )));
        }
        let widths = (0..depth)
            .map(|l| {
                let w = (BASE_WIDTH as f64) * (1u64 << l) as f64 * width_factor;
                ((w / 2.0).round() as usize).max(1) * 2
            })
            .collect();
        let arch = ArchConfig {
            in_channels,
            widths,
            blocks_per_layer: 2,
            kernel: 3,
            shortcut: ShortcutKind::Pad,
            isolation: Isolation::Split,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.blocks_per_layer == 0 || self.kernel == 0 {
            return Err(SparcError::Validation(format!("degenerate architecture {self:?}")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(SparcError::Validation("kernel size must be odd".into()));
        }
        if self.isolation == Isolation::Split {
            if let Some(w) = self.widths.iter().find(|w| **w < 2 || **w % 2 == 1) {
                return Err(SparcError::Validation(format!(
                    "layer width {w} must be even (and >= 2) so task and shared pointwise halves align"
                )));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    /// Task-specific output channels for a unit with `out` channels.
    pub fn taskwise_out(&self, out: usize) -> usize {
        match self.isolation {
            Isolation::Split => crate::layers::taskwise_channels(out),
            Isolation::Complete => out,
        }
    }

    /// `(in, out, stride)` for every split-DSC unit in forward order: the
    /// stem, then two units per residual block.
    pub fn unit_plan(&self) -> Vec<(usize, usize, usize)> {
        let mut plan = vec![(self.in_channels, self.widths[0], 1)];
        let mut prev = self.widths[0];
        for (l, &w) in self.widths.iter().enumerate() {
            for b in 0..self.blocks_per_layer {
                let stride = if l > 0 && b == 0 { 2 } else { 1 };
                plan.push((prev, w, stride));
                plan.push((w, w, 1));
                prev = w;
            }
        }
        plan
    }

    /// Shape of the shared bank for each unit (`None` when nothing is shared).
    pub fn shared_shapes(&self) -> Vec<Option<[usize; 2]>> {
        self.unit_plan()
            .into_iter()
            .map(|(i, o, _)| {
                let rest = o - self.taskwise_out(o);
                (rest > 0).then_some([i, rest])
            })
            .collect()
    }
}

/// All task-specific parameters of one task.
#[derive(Debug, Clone)]
pub struct WorkingMemory {
    pub stem: SplitDscUnit,
    pub stem_bn: TaskBatchNorm,
    pub blocks: Vec<ResidualBlock>,
    pub head: ClassifierHead,
    frozen: bool,
}

impl WorkingMemory {
    pub fn init<R: Rng>(rng: &mut R, arch: &ArchConfig, num_classes: usize, class_offset: usize) -> Self {
        let plan = arch.unit_plan();
        let unit = |rng: &mut R, (i, o, s): (usize, usize, usize)| {
            SplitDscUnit::init(rng, i, o, arch.taskwise_out(o), arch.kernel, s)
        };
        let stem = unit(rng, plan[0]);
        let stem_bn = TaskBatchNorm::new(plan[0].1);
        let mut blocks = Vec::new();
        for pair in plan[1..].chunks(2) {
            let (in_c, out_c, stride) = pair[0];
            let unit1 = unit(rng, pair[0]);
            let unit2 = unit(rng, pair[1]);
            let shortcut = if in_c == out_c && stride == 1 {
                Shortcut::Identity
            } else {
                match arch.shortcut {
                    ShortcutKind::Pad => Shortcut::Pad {
                        stride,
                        out_channels: out_c,
                    },
                    ShortcutKind::Projection => Shortcut::Projection {
                        filters: gaussian(rng, vec![in_c, out_c], (1.0 / in_c as f32).sqrt()),
                        stride,
                    },
                }
            };
            blocks.push(ResidualBlock {
                unit1,
                bn1: TaskBatchNorm::new(out_c),
                unit2,
                bn2: TaskBatchNorm::new(out_c),
                shortcut,
            });
        }
        let head = ClassifierHead::init(rng, arch.feature_dim(), num_classes, class_offset);
        WorkingMemory {
            stem,
            stem_bn,
            blocks,
            head,
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn units(&self) -> Vec<&SplitDscUnit> {
        let mut out = vec![&self.stem];
        for b in &self.blocks {
            out.push(&b.unit1);
            out.push(&b.unit2);
        }
        out
    }

    pub fn batch_norms(&self) -> Vec<&TaskBatchNorm> {
        let mut out = vec![&self.stem_bn];
        for b in &self.blocks {
            out.push(&b.bn1);
            out.push(&b.bn2);
        }
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut TaskBatchNorm> {
        let mut out = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            out.push(&mut b.bn1);
            out.push(&mut b.bn2);
        }
        out
    }

    /// Every trainable tensor, with a stable dotted name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("stem.depthwise".to_string(), &self.stem.depthwise),
            ("stem.taskwise".to_string(), &self.stem.taskwise),
            ("stem_bn.gamma".to_string(), &self.stem_bn.gamma),
            ("stem_bn.beta".to_string(), &self.stem_bn.beta),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.unit1.depthwise"), &b.unit1.depthwise));
            out.push((format!("block{i}.unit1.taskwise"), &b.unit1.taskwise));
            out.push((format!("block{i}.bn1.gamma"), &b.bn1.gamma));
            out.push((format!("block{i}.bn1.beta"), &b.bn1.beta));
            out.push((format!("block{i}.unit2.depthwise"), &b.unit2.depthwise));
            out.push((format!("block{i}.unit2.taskwise"), &b.unit2.taskwise));
            out.push((format!("block{i}.bn2.gamma"), &b.bn2.gamma));
            out.push((format!("block{i}.bn2.beta"), &b.bn2.beta));
            if let Shortcut::Projection { filters, .. } = &b.shortcut {
                out.push((format!("block{i}.projection"), filters));
            }
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.stem.depthwise,
            &mut self.stem.taskwise,
            &mut self.stem_bn.gamma,
            &mut self.stem_bn.beta,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.unit1.depthwise);
            out.push(&mut b.unit1.taskwise);
            out.push(&mut b.bn1.gamma);
            out.push(&mut b.bn1.beta);
            out.push(&mut b.unit2.depthwise);
            out.push(&mut b.unit2.taskwise);
            out.push(&mut b.bn2.gamma);
            out.push(&mut b.bn2.beta);
            if let Shortcut::Projection { filters, .. } = &mut b.shortcut {
                out.push(filters);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Mark every parameter and running moment immutable.
    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            p.freeze();
        }
        self.frozen = true;
    }

    /// Run the backbone and head. `shared` lists the shared bank for every
    /// unit in [`ArchConfig::unit_plan`] order. Returns the logits and, in
    /// train mode, the batch moments of every batch norm in order.
    pub fn forward(
        &self,
        g: &mut Graph,
        shared: &[Option<Tensor>],
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchMoments>)> {
        let n_units = 1 + 2 * self.blocks.len();
        if shared.len() != n_units {
            return Err(SparcError::dim(
                "forward",
                format!("{} shared banks for {n_units} units", shared.len()),
            ));
        }
        let mut moments = Vec::new();
        let h = self.stem.forward(g, shared[0].as_ref(), x)?;
        let (h, m) = self.stem_bn.forward(g, h, mode)?;
        moments.extend(m);
        let mut h = g.relu(h);
        for (i, block) in self.blocks.iter().enumerate() {
            let banks = [shared[1 + 2 * i].as_ref(), shared[2 + 2 * i].as_ref()];
            h = block.forward(g, banks, h, mode, &mut moments)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let logits = self.head.forward(g, pooled)?;
        Ok((logits, moments))
    }

    /// Forward in train mode and fold the batch moments into the running
    /// estimates.
    pub fn forward_train(&mut self, g: &mut Graph, shared: &[Option<Tensor>], x: Var) -> Result<Var> {
        if self.frozen {
            return Err(SparcError::State(
                "train-mode forward on a frozen working memory".into(),
            ));
        }
        let (logits, moments) = self.forward(g, shared, x, Mode::Train)?;
        for (bn, m) in self.batch_norms_mut().into_iter().zip(&moments) {
            bn.update_running(m);
        }
        Ok(logits)
    }

    pub fn trainable_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Shared pointwise filter banks, one per unit, and the EMA rate.
#[derive(Debug, Clone)]
pub struct SemanticMemory {
    pub filters: Vec<Option<Tensor>>,
    pub alpha: f32,
}

impl SemanticMemory {
    pub fn init<R: Rng>(rng: &mut R, arch: &ArchConfig, alpha: f32) -> Self {
        let filters = arch
            .shared_shapes()
            .into_iter()
            .map(|s| s.map(|[m, n]| gaussian(rng, vec![m, n], (2.0 / m as f32).sqrt())))
            .collect();
        SemanticMemory { filters, alpha }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.filters.iter_mut().flatten().collect()
    }

    pub fn is_frozen(&self) -> bool {
        self.filters.iter().flatten().all(|t| t.is_frozen())
    }

    pub fn freeze(&mut self) {
        for t in self.params_mut() {
            t.freeze();
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.filters.iter().flatten().map(|t| t.numel()).sum()
    }

    /// `shared <- alpha * shared + (1 - alpha) * taskwise` per unit.
    pub fn consolidate(&mut self, source: &WorkingMemory) -> Result<()> {
        let alpha = self.alpha;
        for (shared, unit) in self.filters.iter_mut().zip(source.units()) {
            let Some(shared) = shared else { continue };
            if shared.shape() != unit.taskwise.shape() {
                return Err(SparcError::dim(
                    "consolidate_semantic",
                    format!("shared {:?} vs taskwise {:?}", shared.shape(), unit.taskwise.shape()),
                ));
            }
            for (s, t) in shared.data_mut().iter_mut().zip(unit.taskwise.data()) {
                *s = alpha * *s + (1.0 - alpha) * t;
            }
        }
        Ok(())
    }
}

/// Ordered working memories over a common semantic memory.
#[derive(Debug, Clone)]
pub struct SparcModel {
    arch: ArchConfig,
    seed: u64,
    semantic: SemanticMemory,
    tasks: Vec<WorkingMemory>,
}

impl SparcModel {
    pub fn new(arch: ArchConfig, alpha: f32, seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(SparcError::Validation(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(SparcModel {
            arch,
            seed,
            semantic: SemanticMemory {
                filters: Vec::new(),
                alpha,
            },
            tasks: Vec::new(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn alpha(&self) -> f32 {
        self.semantic.alpha
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn semantic(&self) -> &SemanticMemory {
        &self.semantic
    }

    pub fn task(&self, t: usize) -> Result<&WorkingMemory> {
        self.tasks
            .get(t)
            .ok_or_else(|| SparcError::Lookup(format!("task {t} does not exist ({} allocated)", self.tasks.len())))
    }

    fn task_mut(&mut self, t: usize) -> Result<&mut WorkingMemory> {
        let n = self.tasks.len();
        self.tasks
            .get_mut(t)
            .ok_or_else(|| SparcError::Lookup(format!("task {t} does not exist ({n} allocated)")))
    }

    pub fn tasks(&self) -> &[WorkingMemory] {
        &self.tasks
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.num_classes()).collect()
    }

    pub fn total_classes(&self) -> usize {
        self.class_counts().iter().sum()
    }

    /// Allocate a fresh working memory with its own head covering the next
    /// `num_classes` global class slots. Initialization draws from the
    /// `init` sub-stream of `seed` for this task index, so equal seeds give
    /// bit-identical parameters.
    pub fn allocate_working_memory(&mut self, num_classes: usize, seed: u64) -> Result<usize> {
        if num_classes == 0 {
            return Err(SparcError::Validation("a task needs at least one class".into()));
        }
        if let Some(prev) = self.tasks.last() {
            if !prev.is_frozen() {
                return Err(SparcError::State(format!(
                    "task {} must be frozen before allocating a new one",
                    self.tasks.len() - 1
                )));
            }
        }
        let t = self.tasks.len();
        if t == 0 {
            let mut rng = substream(seed, "semantic", 0);
            self.semantic = SemanticMemory::init(&mut rng, &self.arch, self.semantic.alpha);
        }
        let mut rng = substream(seed, "init", t as u64);
        let offset = self.total_classes();
        self.tasks
            .push(WorkingMemory::init(&mut rng, &self.arch, num_classes, offset));
        Ok(t)
    }

    /// Logits of task `t`'s sub-network. Train mode updates only task `t`'s
    /// running moments; eval mode mutates nothing.
    pub fn forward_task(&mut self, g: &mut Graph, t: usize, x: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Eval => self.forward_task_eval(g, t, x),
            Mode::Train => {
                let semantic = &self.semantic.filters;
                let wm = self
                    .tasks
                    .get_mut(t)
                    .ok_or_else(|| SparcError::Lookup(format!("task {t} does not exist")))?;
                wm.forward_train(g, semantic, x)
            }
        }
    }

    pub fn forward_task_eval(&self, g: &mut Graph, t: usize, x: Var) -> Result<Var> {
        let wm = self.task(t)?;
        Ok(wm.forward(g, &self.semantic.filters, x, Mode::Eval)?.0)
    }

    /// Eval-mode logits `[B, C_t]` for a batch of images.
    pub fn task_logits(&self, t: usize, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let y = self.forward_task_eval(&mut g, t, xv)?;
        Ok(g.to_tensor(y))
    }

    /// Parameters updated by gradient descent while training task `t`: its
    /// working memory, plus the shared banks while they are still trainable.
    pub fn trainable_params_mut(&mut self, t: usize) -> Result<Vec<&mut Tensor>> {
        let n = self.tasks.len();
        let wm = self
            .tasks
            .get_mut(t)
            .ok_or_else(|| SparcError::Lookup(format!("task {t} does not exist ({n} allocated)")))?;
        if wm.is_frozen() {
            return Err(SparcError::State(format!("task {t} is frozen")));
        }
        let mut params = wm.params_mut();
        params.extend(self.semantic.filters.iter_mut().flatten().filter(|f| !f.is_frozen()));
        Ok(params)
    }

    /// Freeze task `t`. Freezing the first task also ends gradient training
    /// of the shared banks; from then on they change only by consolidation.
    pub fn freeze_task(&mut self, t: usize) -> Result<()> {
        self.task_mut(t)?.freeze();
        if t == 0 {
            self.semantic.freeze();
        }
        Ok(())
    }

    /// Blend the just-finished task's task-specific pointwise filters into
    /// the shared banks. Not defined for the first task, whose filters the
    /// shared banks were trained alongside.
    pub fn consolidate_semantic(&mut self, finished_task: usize) -> Result<()> {
        if finished_task == 0 {
            return Err(SparcError::State(
                "consolidation applies from the second task onward".into(),
            ));
        }
        let wm = self
            .tasks
            .get(finished_task)
            .ok_or_else(|| SparcError::Lookup(format!("task {finished_task} does not exist")))?;
        self.semantic.consolidate(wm)
    }

    /// Re-normalize task `t`'s head from its final-epoch activation record.
    pub fn renormalize_task_head(&mut self, t: usize, record: &ActivationRecord, kappa: f32) -> Result<RenormOutcome> {
        renormalize_head(&mut self.task_mut(t)?.head, record, kappa)
    }

    /// Multiply task `t`'s head weights and bias by a positive factor.
    pub fn scale_task_head(&mut self, t: usize, factor: f32) -> Result<()> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(SparcError::Validation(format!(
                "head scale must be positive, got {factor}"
            )));
        }
        let head = &mut self.task_mut(t)?.head;
        for v in head.weight.data_mut().iter_mut().chain(head.bias.data_mut().iter_mut()) {
            *v *= factor;
        }
        Ok(())
    }

    pub fn count_parameters(&self) -> ParamCensus {
        analytic_census(&self.arch, &self.class_counts())
    }

    /// Per-task Frobenius norms of the head weights.
    pub fn head_l2_norms(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.head.weight_norm()).collect()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut SemanticMemory, &mut Vec<WorkingMemory>) {
        (&mut self.semantic, &mut self.tasks)
    }
}
