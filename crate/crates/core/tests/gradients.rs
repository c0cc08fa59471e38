//! Finite-difference audit of the backward pass, per operation and through
//! a whole residual block.

use rand::Rng;
use sparc_core::layers::{Mode, ResidualBlock, Shortcut, SplitDscUnit, TaskBatchNorm};
use sparc_core::rng::substream;
use sparc_core::tensor::{audit_operations, GradCheck, Graph, Tensor, Var};

const MAX_REL_ERROR: f64 = 1e-2;

#[test]
fn every_operation_matches_central_differences() {
    let audits = audit_operations(&GradCheck::default()).unwrap();
    let mut per_op = std::collections::BTreeMap::<&str, usize>::new();
    for a in &audits {
        *per_op.entry(a.op).or_default() += 1;
        assert!(
            a.report.max_rel_error < MAX_REL_ERROR,
            "{} {}: relative error {}",
            a.op,
            a.case,
            a.report.max_rel_error
        );
    }
    assert_eq!(per_op.len(), 14);
    assert!(per_op.values().all(|n| *n >= 5), "{per_op:?}");
}

fn block(shortcut_kind: &str, seed: u64) -> (ResidualBlock, [Tensor; 2], usize) {
    let mut rng = substream(seed, "block", 0);
    let (in_c, out_c, stride) = match shortcut_kind {
        "identity" => (4, 4, 1),
        _ => (2, 4, 2),
    };
    let unit1 = SplitDscUnit::init(&mut rng, in_c, out_c, out_c / 2, 3, stride);
    let unit2 = SplitDscUnit::init(&mut rng, out_c, out_c, out_c / 2, 3, 1);
    let s1 = Tensor::parameter(
        vec![in_c, out_c / 2],
        (0..in_c * out_c / 2).map(|i| 0.37 - 0.11 * i as f32).collect(),
    )
    .unwrap();
    let s2 = Tensor::parameter(
        vec![out_c, out_c / 2],
        (0..out_c * out_c / 2).map(|i| 0.05 * i as f32 - 0.21).collect(),
    )
    .unwrap();
    let shortcut = match shortcut_kind {
        "identity" => Shortcut::Identity,
        "pad" => Shortcut::Pad {
            stride,
            out_channels: out_c,
        },
        _ => Shortcut::Projection {
            filters: Tensor::parameter(
                vec![in_c, out_c],
                (0..in_c * out_c).map(|i| 0.1 * i as f32 - 0.3).collect(),
            )
            .unwrap(),
            stride,
        },
    };
    let mut bn1 = TaskBatchNorm::new(out_c);
    bn1.gamma.data_mut().copy_from_slice(&[1.1, 0.9, 1.3, 0.7][..out_c]);
    let block = ResidualBlock {
        unit1,
        bn1,
        unit2,
        bn2: TaskBatchNorm::new(out_c),
        shortcut,
    };
    (block, [s1, s2], in_c)
}

/// How the block's two ReLUs are applied.
#[derive(Clone, Copy)]
enum Activation<'a> {
    Relu,
    /// Multiply by a fixed 0/1 pattern: the linear piece the block is on.
    Masked(&'a [Vec<f32>; 2]),
}

fn inputs_for(kind: &str, seed: u64) -> (ResidualBlock, Vec<Tensor>) {
    let (blk, shared, in_c) = block(kind, seed);
    let mut rng = substream(seed, "block-input", 0);
    let n = 2 * in_c * 4 * 4;
    let x = Tensor::new(
        vec![2, in_c, 4, 4],
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap();
    let mut params = vec![
        x,
        blk.unit1.depthwise.clone(),
        blk.unit1.taskwise.clone(),
        shared[0].clone(),
        blk.bn1.gamma.clone(),
        blk.bn1.beta.clone(),
        blk.unit2.depthwise.clone(),
        blk.unit2.taskwise.clone(),
        shared[1].clone(),
        blk.bn2.gamma.clone(),
        blk.bn2.beta.clone(),
    ];
    if let Shortcut::Projection { filters, .. } = &blk.shortcut {
        params.push(filters.clone());
    }
    (blk, params)
}

/// Analytic gradients of `Σ out ⊙ r` for every leaf, plus the two
/// pre-activations.
fn analytic(blk: &ResidualBlock, params: &[Tensor], act: Activation) -> (Vec<Vec<f32>>, [Vec<f32>; 2]) {
    let mut g = Graph::new();
    let leaves: Vec<Var> = params
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            g.param(&t)
        })
        .collect();
    let (out, pre) = forward_with_leaves(&mut g, blk, &leaves, act).unwrap();
    let n = g.value(out).len();
    let r = g
        .constant(
            g.shape(out).to_vec(),
            (0..n).map(|i| ((i * 13) % 7) as f32 - 3.0).collect(),
        )
        .unwrap();
    let w = g.mul(out, r).unwrap();
    let loss = g.sum(w);
    g.backward(loss).unwrap();
    let grads = leaves.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();
    (grads, [g.value(pre[0]).to_vec(), g.value(pre[1]).to_vec()])
}

/// Every parameter of a block (task filters, shared filters, BN affine,
/// projection) against central differences. A perturbation moves every
/// pre-activation of a channel through batch norm, so some cross a ReLU
/// kink; the check therefore runs on the block with its activation pattern
/// frozen, and separately shows the real block has the same gradients.
#[test]
fn residual_block_parameter_sweep() {
    let check = GradCheck {
        max_coords: 24,
        ..GradCheck::default()
    };
    for (i, kind) in ["identity", "pad", "projection"].into_iter().enumerate() {
        let (blk, params) = inputs_for(kind, i as u64);
        let (relu_grads, pre) = analytic(&blk, &params, Activation::Relu);
        let masks = pre
            .clone()
            .map(|p| p.iter().map(|v| f32::from(u8::from(*v > 0.0))).collect::<Vec<_>>());
        assert!(
            pre.iter().flatten().all(|v| *v != 0.0),
            "{kind}: pre-activation exactly at the kink"
        );

        let (masked_grads, _) = analytic(&blk, &params, Activation::Masked(&masks));
        assert_eq!(relu_grads, masked_grads, "{kind}");

        let build = |g: &mut Graph, v: &[Var]| Ok(forward_with_leaves(g, &blk, v, Activation::Masked(&masks))?.0);
        let report = check.run(&params, build).unwrap();
        assert!(report.max_rel_error < MAX_REL_ERROR, "{kind}: {}", report.max_rel_error);
        assert!(report.coords_checked >= 80, "{kind}: {}", report.coords_checked);
    }
}

/// The block forward, written against graph leaves so every parameter can
/// be perturbed. Returns the output and the two pre-activations.
fn forward_with_leaves(
    g: &mut Graph,
    blk: &ResidualBlock,
    v: &[Var],
    act: Activation,
) -> sparc_core::Result<(Var, [Var; 2])> {
    let x = v[0];
    let unit = |g: &mut Graph, x: Var, dw: Var, tw: Var, sh: Var, stride: usize| -> sparc_core::Result<Var> {
        let d = g.conv_depthwise(x, dw, stride, 1)?;
        let a = g.conv_pointwise(d, tw)?;
        let b = g.conv_pointwise(d, sh)?;
        g.concat_channels(a, b)
    };
    let activate = |g: &mut Graph, h: Var, i: usize| -> sparc_core::Result<Var> {
        match act {
            Activation::Relu => Ok(g.relu(h)),
            Activation::Masked(m) => {
                let mask = g.constant(g.shape(h).to_vec(), m[i].clone())?;
                g.mul(h, mask)
            }
        }
    };
    let h = unit(g, x, v[1], v[2], v[3], blk.unit1.stride)?;
    let (pre1, _) = g.batch_norm_train(h, v[4], v[5], 1e-5)?;
    let h = activate(g, pre1, 0)?;
    let h = unit(g, h, v[6], v[7], v[8], 1)?;
    let (h, _) = g.batch_norm_train(h, v[9], v[10], 1e-5)?;
    let skip = match &blk.shortcut {
        Shortcut::Identity => x,
        Shortcut::Pad { stride, out_channels } => g.downsample_pad(x, *stride, *out_channels)?,
        Shortcut::Projection { stride, .. } => {
            let in_c = g.shape(x)[1];
            let sub = g.downsample_pad(x, *stride, in_c)?;
            g.conv_pointwise(sub, v[11])?
        }
    };
    let pre2 = g.add(h, skip)?;
    Ok((activate(g, pre2, 1)?, [pre1, pre2]))
}

/// The hand-assembled forward above is the library block forward.
#[test]
fn leaf_forward_matches_block_forward() {
    for (i, kind) in ["identity", "pad", "projection"].into_iter().enumerate() {
        let (blk, shared, in_c) = block(kind, i as u64);
        let x = Tensor::new(
            vec![2, in_c, 6, 6],
            (0..2 * in_c * 36)
                .map(|j| ((j * 37) % 17) as f32 / 17.0 - 0.5)
                .collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.input(&x);
        let mut moments = Vec::new();
        let y = blk
            .forward(
                &mut g,
                [Some(&shared[0]), Some(&shared[1])],
                xv,
                Mode::Train,
                &mut moments,
            )
            .unwrap();
        let lib = g.value(y).to_vec();
        let mut g2 = Graph::new();
        let mut leaves = vec![
            g2.input(&x),
            g2.input(&blk.unit1.depthwise),
            g2.input(&blk.unit1.taskwise),
            g2.input(&shared[0]),
            g2.input(&blk.bn1.gamma),
            g2.input(&blk.bn1.beta),
            g2.input(&blk.unit2.depthwise),
            g2.input(&blk.unit2.taskwise),
            g2.input(&shared[1]),
            g2.input(&blk.bn2.gamma),
            g2.input(&blk.bn2.beta),
        ];
        if let Shortcut::Projection { filters, .. } = &blk.shortcut {
            leaves.push(g2.input(filters));
        }
        let (y2, _) = forward_with_leaves(&mut g2, &blk, &leaves, Activation::Relu).unwrap();
        assert_eq!(g2.value(y2), lib.as_slice(), "{kind}");
        assert_eq!(moments.len(), 2);
    }
}
