//! Network building blocks: the split depthwise-separable unit, task batch
//! norm, the residual block and the per-task classifier head.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SparcError};
use crate::tensor::{BatchMoments, Graph, Tensor, Var};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fan-in scaled zero-mean Gaussian initializer.
pub(crate) fn gaussian<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0f32, std).expect("std is finite and positive");
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::parameter(shape, data).expect("consistent by construction")
}

/// Task-specific half of the pointwise output channels.
pub fn taskwise_channels(out_channels: usize) -> usize {
    out_channels / 2
}

/// One depthwise-separable convolution whose pointwise stage is split in
/// two banks: output channels `[0, N_t)` come from the task-specific filters
/// held here, channels `[N_t, N)` from filters supplied by the caller (the
/// shared semantic memory). Both banks read the same depthwise output.
#[derive(Debug, Clone)]
pub struct SplitDscUnit {
    /// `[M, k, k]`
    pub depthwise: Tensor,
    /// `[M, N_t]`
    pub taskwise: Tensor,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
}

impl SplitDscUnit {
    /// `taskwise_out` is `N_t`; pass `out_channels` for a unit with no
    /// shared half.
    pub fn init<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        taskwise_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let depthwise = gaussian(
            rng,
            vec![in_channels, kernel, kernel],
            (2.0 / (kernel * kernel) as f32).sqrt(),
        );
        let taskwise = gaussian(rng, vec![in_channels, taskwise_out], (2.0 / in_channels as f32).sqrt());
        SplitDscUnit {
            depthwise,
            taskwise,
            out_channels,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.depthwise.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.depthwise.shape()[1]
    }

    pub fn taskwise_out(&self) -> usize {
        self.taskwise.shape()[1]
    }

    /// Shape the shared filter bank must have, if any.
    pub fn shared_shape(&self) -> Option<[usize; 2]> {
        let rest = self.out_channels - self.taskwise_out();
        (rest > 0).then_some([self.in_channels(), rest])
    }

    pub fn forward(&self, g: &mut Graph, shared: Option<&Tensor>, x: Var) -> Result<Var> {
        let expected = self.shared_shape();
        let got = shared.map(|t| t.shape().to_vec());
        if expected.map(|s| s.to_vec()) != got {
            return Err(SparcError::dim(
                "split_dsc_forward",
                format!("shared pointwise filters {got:?}, unit expects {expected:?}"),
            ));
        }
        let dw = g.param(&self.depthwise);
        let depth_out = g.conv_depthwise(x, dw, self.stride, self.padding)?;
        let tw = g.param(&self.taskwise);
        let task_half = g.conv_pointwise(depth_out, tw)?;
        match shared {
            Some(s) => {
                let sv = g.param(s);
                let shared_half = g.conv_pointwise(depth_out, sv)?;
                g.concat_channels(task_half, shared_half)
            }
            None => Ok(task_half),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.depthwise.numel() + self.taskwise.numel()
    }
}

/// Batch normalization with task-owned affine parameters and running
/// moments.
#[derive(Debug, Clone)]
pub struct TaskBatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl TaskBatchNorm {
    pub fn new(channels: usize) -> Self {
        TaskBatchNorm {
            gamma: Tensor::parameter(vec![channels], vec![1.0; channels]).expect("consistent"),
            beta: Tensor::parameter(vec![channels], vec![0.0; channels]).expect("consistent"),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Train mode returns the batch moments without touching the running
    /// estimates; apply them with [`TaskBatchNorm::update_running`].
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Option<BatchMoments>)> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        match mode {
            Mode::Train => {
                let (y, m) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                Ok((y, Some(m)))
            }
            Mode::Eval => {
                let y = g.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps)?;
                Ok((y, None))
            }
        }
    }

    /// `running <- (1 - momentum) * running + momentum * batch`; the
    /// variance uses the unbiased batch estimate.
    pub fn update_running(&mut self, m: &BatchMoments) {
        let correction = m.count as f32 / (m.count as f32 - 1.0);
        let mom = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&m.mean) {
            *r = (1.0 - mom) * *r + mom * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&m.var) {
            *r = (1.0 - mom) * *r + mom * b * correction;
        }
    }
}

/// How the residual path is carried when the block changes shape.
#[derive(Debug, Clone)]
pub enum Shortcut {
    Identity,
    /// Parameter-free: strided subsampling plus zero channels.
    Pad {
        stride: usize,
        out_channels: usize,
    },
    /// Task-specific strided pointwise projection `[C_in, C_out]`.
    Projection {
        filters: Tensor,
        stride: usize,
    },
}

/// Two split-DSC stages, each followed by task batch norm, plus a skip path:
/// `relu(bn2(dsc2(relu(bn1(dsc1(x))))) + skip(x))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub unit1: SplitDscUnit,
    pub bn1: TaskBatchNorm,
    pub unit2: SplitDscUnit,
    pub bn2: TaskBatchNorm,
    pub shortcut: Shortcut,
}

impl ResidualBlock {
    pub fn forward(
        &self,
        g: &mut Graph,
        shared: [Option<&Tensor>; 2],
        x: Var,
        mode: Mode,
        moments: &mut Vec<BatchMoments>,
    ) -> Result<Var> {
        let in_c = g.shape(x)[1];
        if in_c != self.unit1.in_channels() {
            return Err(SparcError::dim(
                "residual_block_forward",
                format!("input has {in_c} channels, block expects {}", self.unit1.in_channels()),
            ));
        }
        let h = self.unit1.forward(g, shared[0], x)?;
        let (h, m1) = self.bn1.forward(g, h, mode)?;
        let h = g.relu(h);
        let h = self.unit2.forward(g, shared[1], h)?;
        let (h, m2) = self.bn2.forward(g, h, mode)?;
        moments.extend(m1);
        moments.extend(m2);
        let skip = match &self.shortcut {
            Shortcut::Identity => x,
            Shortcut::Pad { stride, out_channels } => g.downsample_pad(x, *stride, *out_channels)?,
            Shortcut::Projection { filters, stride } => {
                let sub = g.downsample_pad(x, *stride, in_c)?;
                let f = g.param(filters);
                g.conv_pointwise(sub, f)?
            }
        };
        if g.shape(skip) != g.shape(h) {
            return Err(SparcError::dim(
                "residual_block_forward",
                format!("skip path {:?} vs main path {:?}", g.shape(skip), g.shape(h)),
            ));
        }
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }
}

/// Task-isolated fully connected classifier.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    /// `[D, C_t]`
    pub weight: Tensor,
    /// `[C_t]`
    pub bias: Tensor,
    /// Global index of this head's first class in the concatenated output.
    pub class_offset: usize,
}

impl ClassifierHead {
    pub fn init<R: Rng>(rng: &mut R, features: usize, classes: usize, class_offset: usize) -> Self {
        ClassifierHead {
            weight: gaussian(rng, vec![features, classes], (1.0 / features as f32).sqrt()),
            bias: Tensor::parameter(vec![classes], vec![0.0; classes]).expect("consistent"),
            class_offset,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.linear(features, w, b)
    }

    /// Frobenius norm of the weight matrix.
    pub fn weight_norm(&self) -> f64 {
        self.weight
            .data()
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt()
    }
}
