use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorId};
use crate::error::{Result, SparcError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchMoments {
    pub mean: Vec<f32>,
    /// Biased (population) variance.
    pub var: Vec<f32>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Depthwise {
        x: Var,
        f: Var,
        geom: ConvGeom,
    },
    Pointwise {
        x: Var,
        f: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Sum {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f32>,
        xhat: Vec<f32>,
    },
    DownsamplePad {
        x: Var,
        stride: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
    source: Option<TensorId>,
}

/// A tape of executed operations. Nodes are appended in execution order, so
/// the node list is already topologically sorted; backward walks it in
/// reverse and visits every node once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn shape4(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    match s {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(SparcError::dim(op, format!("expected rank-4 [B,C,H,W], got {s:?}"))),
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match dst {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        None => *dst = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record a tensor as a leaf. Gradients flow to it only if it requires
    /// grad and is not frozen.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad() && !t.is_frozen();
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg);
        self.nodes[v.0].source = Some(t.id());
        v
    }

    /// Record a constant input (never receives a gradient).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(SparcError::dim(
                "constant",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    /// Per-channel spatial convolution with filters `[M,k,k]`.
    pub fn conv_depthwise(&mut self, x: Var, f: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv_depthwise";
        let [b, m, h, w] = shape4(OP, self.shape(x))?;
        let fs = self.shape(f).to_vec();
        let k = match fs.as_slice() {
            [fm, k1, k2] if *fm == m && k1 == k2 => *k1,
            _ => {
                return Err(SparcError::dim(
                    OP,
                    format!("filters {fs:?} incompatible with input channels {m} (axis 1)"),
                ))
            }
        };
        if stride == 0 {
            return Err(SparcError::Validation("conv_depthwise stride must be positive".into()));
        }
        if k == 0 || k > h + 2 * padding || k > w + 2 * padding {
            return Err(SparcError::dim(
                OP,
                format!(
                    "kernel {k} exceeds padded spatial size {}x{} (axes 2,3)",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        let geom = ConvGeom {
            batch: b,
            channels: m,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
            out_h: kernels::conv_out_len(h, k, stride, padding),
            out_w: kernels::conv_out_len(w, k, stride, padding),
        };
        let y = kernels::depthwise_forward(&geom, self.value(x), self.value(f));
        let rg = self.rg(&[x, f]);
        Ok(self.push(vec![b, m, geom.out_h, geom.out_w], y, Op::Depthwise { x, f, geom }, rg))
    }

    /// 1x1 channel projection with filters `[M,N]`.
    pub fn conv_pointwise(&mut self, x: Var, f: Var) -> Result<Var> {
        const OP: &str = "conv_pointwise";
        let [b, m, h, w] = shape4(OP, self.shape(x))?;
        let n = match self.shape(f) {
            [fm, n] if *fm == m => *n,
            s => return Err(SparcError::dim(OP, format!("filters {s:?} need leading dim {m}"))),
        };
        let y = kernels::pointwise_forward(b, m, n, h * w, self.value(x), self.value(f));
        let rg = self.rg(&[x, f]);
        Ok(self.push(vec![b, n, h, w], y, Op::Pointwise { x, f }, rg))
    }

    /// Concatenate two NCHW tensors along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [ba, ca, ha, wa] = shape4(OP, self.shape(a))?;
        let [bb, cb, hb, wb] = shape4(OP, self.shape(b))?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(SparcError::dim(
                OP,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let plane = ha * wa;
        let mut y = Vec::with_capacity(ba * (ca + cb) * plane);
        for i in 0..ba {
            y.extend_from_slice(&self.value(a)[i * ca * plane..(i + 1) * ca * plane]);
            y.extend_from_slice(&self.value(b)[i * cb * plane..(i + 1) * cb * plane]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![ba, ca + cb, ha, wa], y, Op::ConcatChannels { a, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), y, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SparcError::dim(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(p, q)| p + q).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SparcError::dim(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(p, q)| p * q).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let y = self.value(x).iter().map(|v| v * factor).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), y, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(0.0f32, |acc, v| acc + v);
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Sum { x }, rg)
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = shape4("global_avg_pool", self.shape(x))?;
        let plane = h * w;
        if plane == 0 {
            return Err(SparcError::dim(
                "global_avg_pool",
                "empty spatial dimensions (axes 2,3)",
            ));
        }
        let xv = self.value(x);
        let y = (0..b * c)
            .map(|i| xv[i * plane..(i + 1) * plane].iter().fold(0.0f32, |a, v| a + v) / plane as f32)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![b, c], y, Op::GlobalAvgPool { x }, rg))
    }

    /// `x[B,D] · w[D,C] + bias[C]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (rows, d) = match self.shape(x) {
            [r, d] => (*r, *d),
            s => return Err(SparcError::dim("linear", format!("input must be [B,D], got {s:?}"))),
        };
        let c = match self.shape(w) {
            [wd, c] if *wd == d => *c,
            s => return Err(SparcError::dim("linear", format!("weight {s:?} needs leading dim {d}"))),
        };
        if self.shape(bias) != [c] {
            return Err(SparcError::dim(
                "linear",
                format!("bias {:?} must be [{c}]", self.shape(bias)),
            ));
        }
        let y = kernels::linear_forward(rows, d, c, self.value(x), self.value(w), self.value(bias));
        let rg = self.rg(&[x, w, bias]);
        Ok(self.push(vec![rows, c], y, Op::Linear { x, w, b: bias }, rg))
    }

    /// Normalize with batch statistics, then apply the affine transform.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchMoments)> {
        const OP: &str = "batch_norm";
        let [b, c, h, w] = shape4(OP, self.shape(x))?;
        self.check_affine(OP, c, gamma, beta)?;
        let plane = h * w;
        let count = b * plane;
        if count < 2 {
            return Err(SparcError::Validation(format!(
                "training-mode batch norm needs at least 2 values per channel, got {count}"
            )));
        }
        let xv = self.value(x);
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f32;
            for i in 0..b {
                let base = (i * c + ch) * plane;
                s = xv[base..base + plane].iter().fold(s, |a, v| a + v);
            }
            let mu = s / count as f32;
            let mut ss = 0.0f32;
            for i in 0..b {
                let base = (i * c + ch) * plane;
                ss = xv[base..base + plane].iter().fold(ss, |a, v| a + (v - mu) * (v - mu));
            }
            mean[ch] = mu;
            var[ch] = ss / count as f32;
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, y) = self.normalize(x, gamma, beta, &mean, &inv_std, c, plane);
        let rg = self.rg(&[x, gamma, beta]);
        let out = self.push(
            vec![b, c, h, w],
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((out, BatchMoments { mean, var, count }))
    }

    /// Normalize with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let [b, c, h, w] = shape4(OP, self.shape(x))?;
        self.check_affine(OP, c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(SparcError::dim(OP, format!("running moments must have {c} channels")));
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, y) = self.normalize(x, gamma, beta, mean, &inv_std, c, h * w);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            vec![b, c, h, w],
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
            rg,
        ))
    }

    fn check_affine(&self, op: &'static str, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(SparcError::dim(
                op,
                format!(
                    "gamma {:?} / beta {:?} must be [{c}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        inv_std: &[f32],
        c: usize,
        plane: usize,
    ) -> (Vec<f32>, Vec<f32>) {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![0.0f32; xv.len()];
        let mut y = vec![0.0f32; xv.len()];
        for (idx, chunk) in xv.chunks(plane).enumerate() {
            let ch = idx % c;
            let base = idx * plane;
            for (p, v) in chunk.iter().enumerate() {
                let n = (v - mean[ch]) * inv_std[ch];
                xhat[base + p] = n;
                y[base + p] = gv[ch] * n + bv[ch];
            }
        }
        (xhat, y)
    }

    /// Strided spatial subsampling followed by zero-padding the channel axis
    /// up to `out_channels`. A parameter-free residual shortcut.
    pub fn downsample_pad(&mut self, x: Var, stride: usize, out_channels: usize) -> Result<Var> {
        const OP: &str = "downsample_pad";
        let [b, c, h, w] = shape4(OP, self.shape(x))?;
        if stride == 0 || out_channels < c {
            return Err(SparcError::dim(
                OP,
                format!("cannot map {c} channels to {out_channels} with stride {stride}"),
            ));
        }
        let oh = (h - 1) / stride + 1;
        let ow = (w - 1) / stride + 1;
        let xv = self.value(x);
        let mut y = vec![0.0f32; b * out_channels * oh * ow];
        for i in 0..b {
            for ch in 0..c {
                let src = (i * c + ch) * h * w;
                let dst = (i * out_channels + ch) * oh * ow;
                for r in 0..oh {
                    for q in 0..ow {
                        y[dst + r * ow + q] = xv[src + r * stride * w + q * stride];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![b, out_channels, oh, ow], y, Op::DownsamplePad { x, stride }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = match self.shape(logits) {
            [b, c] => (*b, *c),
            s => {
                return Err(SparcError::dim(
                    "softmax_cross_entropy",
                    format!("logits must be [B,C], got {s:?}"),
                ))
            }
        };
        if labels.len() != b {
            return Err(SparcError::Validation(format!(
                "{} labels for batch of {b}",
                labels.len()
            )));
        }
        if b == 0 {
            return Err(SparcError::Validation("empty batch".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(SparcError::Validation(format!("label {bad} out of range [0, {c})")));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0f32; b * c];
        let mut total = 0.0f32;
        for r in 0..b {
            let row = &z[r * c..(r + 1) * c];
            let max = row.iter().fold(f32::NEG_INFINITY, |a, v| a.max(*v));
            let mut s = 0.0f32;
            for (k, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + k] = e;
                s += e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= s;
            }
            total += s.ln() + max - row[labels[r]];
        }
        let loss = total / b as f32;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Node gradients are kept in
    /// the graph; use [`Graph::grad`] or [`Graph::accumulate_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(SparcError::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let need = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Depthwise { x, f, geom } => {
                let (gx, gf) = kernels::depthwise_backward(geom, self.value(*x), self.value(*f), gy, need(x), need(f));
                if let Some(g) = gx {
                    add_into(&mut grads[x.0], g);
                }
                if let Some(g) = gf {
                    add_into(&mut grads[f.0], g);
                }
            }
            Op::Pointwise { x, f } => {
                let [b, m, h, w] = shape4("conv_pointwise", self.shape(*x)).expect("checked in forward");
                let n = self.shape(*f)[1];
                let (gx, gf) =
                    kernels::pointwise_backward(b, m, n, h * w, self.value(*x), self.value(*f), gy, need(x), need(f));
                if let Some(g) = gx {
                    add_into(&mut grads[x.0], g);
                }
                if let Some(g) = gf {
                    add_into(&mut grads[f.0], g);
                }
            }
            Op::ConcatChannels { a, b } => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let batch = node.shape[0];
                let plane = node.shape[2] * node.shape[3];
                let mut ga = need(a).then(|| Vec::with_capacity(batch * ca * plane));
                let mut gb = need(b).then(|| Vec::with_capacity(batch * cb * plane));
                for i in 0..batch {
                    let base = i * (ca + cb) * plane;
                    if let Some(g) = ga.as_mut() {
                        g.extend_from_slice(&gy[base..base + ca * plane]);
                    }
                    if let Some(g) = gb.as_mut() {
                        g.extend_from_slice(&gy[base + ca * plane..base + (ca + cb) * plane]);
                    }
                }
                if let Some(g) = ga {
                    add_into(&mut grads[a.0], g);
                }
                if let Some(g) = gb {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Relu { x } => {
                let g = self
                    .value(*x)
                    .iter()
                    .zip(gy)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], g);
            }
            Op::Add { a, b } => {
                if need(a) {
                    add_into(&mut grads[a.0], gy.to_vec());
                }
                if need(b) {
                    add_into(&mut grads[b.0], gy.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if need(a) {
                    let g = self.value(*b).iter().zip(gy).map(|(v, g)| v * g).collect();
                    add_into(&mut grads[a.0], g);
                }
                if need(b) {
                    let g = self.value(*a).iter().zip(gy).map(|(v, g)| v * g).collect();
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Scale { x, factor } => {
                add_into(&mut grads[x.0], gy.iter().map(|g| g * factor).collect());
            }
            Op::Sum { x } => {
                add_into(&mut grads[x.0], vec![gy[0]; self.value(*x).len()]);
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f32;
                let mut g = Vec::with_capacity(self.value(*x).len());
                for v in gy {
                    g.extend(std::iter::repeat_n(v * inv, plane));
                }
                add_into(&mut grads[x.0], g);
            }
            Op::Linear { x, w, b } => {
                let (rows, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let c = self.shape(*w)[1];
                if need(x) {
                    let wv = self.value(*w);
                    let mut g = vec![0.0f32; rows * d];
                    for r in 0..rows {
                        for k in 0..d {
                            let mut acc = 0.0f32;
                            for j in 0..c {
                                acc += gy[r * c + j] * wv[k * c + j];
                            }
                            g[r * d + k] = acc;
                        }
                    }
                    add_into(&mut grads[x.0], g);
                }
                if need(w) {
                    let xv = self.value(*x);
                    let mut g = vec![0.0f32; d * c];
                    for r in 0..rows {
                        for k in 0..d {
                            let a = xv[r * d + k];
                            for j in 0..c {
                                g[k * c + j] += a * gy[r * c + j];
                            }
                        }
                    }
                    add_into(&mut grads[w.0], g);
                }
                if need(b) {
                    let mut g = vec![0.0f32; c];
                    for r in 0..rows {
                        for j in 0..c {
                            g[j] += gy[r * c + j];
                        }
                    }
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [b, c, h, w] = shape4("batch_norm", &node.shape).expect("rank 4");
                let plane = h * w;
                let count = (b * plane) as f32;
                let gv = self.value(*gamma);
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                for i in 0..b {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for p in base..base + plane {
                            sum_dy[ch] += gy[p];
                            sum_dy_xhat[ch] += gy[p] * xhat[p];
                        }
                    }
                }
                if need(x) {
                    let mut g = vec![0.0f32; gy.len()];
                    for i in 0..b {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            let k = gv[ch] * inv_std[ch] / count;
                            for p in base..base + plane {
                                g[p] = k * (count * gy[p] - sum_dy[ch] - xhat[p] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                    add_into(&mut grads[x.0], g);
                }
                if need(gamma) {
                    add_into(&mut grads[gamma.0], sum_dy_xhat);
                }
                if need(beta) {
                    add_into(&mut grads[beta.0], sum_dy);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            } => {
                let [b, c, h, w] = shape4("batch_norm", &node.shape).expect("rank 4");
                let plane = h * w;
                let gv = self.value(*gamma);
                if need(x) {
                    let mut g = vec![0.0f32; gy.len()];
                    for (idx, chunk) in gy.chunks(plane).enumerate() {
                        let ch = idx % c;
                        for (p, v) in chunk.iter().enumerate() {
                            g[idx * plane + p] = v * gv[ch] * inv_std[ch];
                        }
                    }
                    add_into(&mut grads[x.0], g);
                }
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                for i in 0..b {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for p in base..base + plane {
                            sum_dy[ch] += gy[p];
                            sum_dy_xhat[ch] += gy[p] * xhat[p];
                        }
                    }
                }
                if need(gamma) {
                    add_into(&mut grads[gamma.0], sum_dy_xhat);
                }
                if need(beta) {
                    add_into(&mut grads[beta.0], sum_dy);
                }
            }
            Op::DownsamplePad { x, stride } => {
                let [b, c, h, w] = shape4("downsample_pad", self.shape(*x)).expect("rank 4");
                let (oc, oh, ow) = (node.shape[1], node.shape[2], node.shape[3]);
                let mut g = vec![0.0f32; b * c * h * w];
                for i in 0..b {
                    for ch in 0..c {
                        let src = (i * oc + ch) * oh * ow;
                        let dst = (i * c + ch) * h * w;
                        for r in 0..oh {
                            for q in 0..ow {
                                g[dst + r * stride * w + q * stride] += gy[src + r * ow + q];
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], g);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = gy[0] / b as f32;
                let mut g: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * c + l] -= scale;
                }
                add_into(&mut grads[logits.0], g);
            }
        }
    }

    /// Gradient of the last backward's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Add recorded leaf gradients into the matching tensors' `grad` buffers.
    /// A tensor bound more than once receives the sum over its bindings.
    pub fn accumulate_grads<'a, I>(&self, params: I)
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        let mut by_source: HashMap<TensorId, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let (Some(id), Op::Leaf) = (n.source, &n.op) {
                by_source.entry(id).or_default().push(i);
            }
        }
        for t in params {
            let Some(idxs) = by_source.get(&t.id()) else { continue };
            for &i in idxs {
                if let Some(g) = self.grads.get(i).and_then(|g| g.as_deref()) {
                    t.accumulate_grad(g);
                }
            }
        }
    }
}
