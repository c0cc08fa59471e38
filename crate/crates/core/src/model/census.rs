use super::{ArchConfig, ShortcutKind};

/// Trainable-parameter census. Running moments are buffers, not
/// parameters, and are excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCensus {
    pub per_task: Vec<usize>,
    pub shared: usize,
    pub total: usize,
}

/// Depthwise-separable unit: `k*k*c_in` depthwise plus `c_in*c_out`
/// pointwise parameters.
pub fn dsc_unit_params(kernel: usize, c_in: usize, c_out: usize) -> usize {
    kernel * kernel * c_in + c_in * c_out
}

/// Dense convolution with the same shape, for comparison.
pub fn dense_conv_params(kernel: usize, c_in: usize, c_out: usize) -> usize {
    kernel * kernel * c_in * c_out
}

/// Count parameters from the architecture alone, for a model whose tasks
/// have the given class counts.
pub fn analytic_census(arch: &ArchConfig, class_counts: &[usize]) -> ParamCensus {
    let mut backbone = 0usize;
    let mut shared = 0usize;
    for (c_in, c_out, _) in arch.unit_plan() {
        let task_out = arch.taskwise_out(c_out);
        backbone += dsc_unit_params(arch.kernel, c_in, task_out);
        backbone += 2 * c_out; // batch norm gamma and beta
        shared += c_in * (c_out - task_out);
    }
    if arch.shortcut == ShortcutKind::Projection {
        let plan = arch.unit_plan();
        for pair in plan[1..].chunks(2) {
            let (c_in, c_out, stride) = pair[0];
            if c_in != c_out || stride != 1 {
                backbone += c_in * c_out;
            }
        }
    }
    let d = arch.feature_dim();
    let per_task: Vec<usize> = class_counts.iter().map(|c| backbone + d * c + c).collect();
    let total = per_task.iter().sum::<usize>() + if class_counts.is_empty() { 0 } else { shared };
    ParamCensus {
        per_task,
        shared: if class_counts.is_empty() { 0 } else { shared },
        total,
    }
}
