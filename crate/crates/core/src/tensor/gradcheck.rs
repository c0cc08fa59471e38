//! Central finite-difference audit of recorded gradients.
//!
//! The scalar probed is `L = Σ out ⊙ R` for a fixed random `R`, so every
//! output element contributes. Numeric derivatives evaluate `L` in f64 from
//! the f32 forward values at `x ± ε`.

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Result, SparcError};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Half-width of the central difference.
    pub epsilon: f32,
    /// Coordinates probed per input; inputs with more elements are probed
    /// at evenly spaced positions.
    pub max_coords: usize,
    /// Denominator floor of the relative error. With f32 forward values and
    /// a 1e-3 step the central difference carries roughly 3e-4 of rounding
    /// noise, so relative errors of smaller gradients are not measurable;
    /// below the floor the check acts as an absolute tolerance.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            epsilon: 1e-3,
            max_coords: 48,
            floor: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

fn projected(g: &Graph, out: Var, r: &[f32]) -> f64 {
    g.value(out)
        .iter()
        .zip(r)
        .map(|(a, b)| f64::from(*a) * f64::from(*b))
        .sum()
}

impl GradCheck {
    /// Compare backward gradients of every input against central
    /// differences. `build` must be a pure function of the bound inputs.
    pub fn run<F>(&self, inputs: &[Tensor], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut inputs: Vec<Tensor> = inputs.to_vec();
        for t in inputs.iter_mut() {
            t.set_requires_grad(true);
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars)?;
        let mut rng = substream(self.seed, "gradcheck", 0);
        let n_out = g.value(out).len();
        let r: Vec<f32> = (0..n_out).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let rv = g.constant(g.shape(out).to_vec(), r.clone())?;
        let weighted = g.mul(out, rv)?;
        let loss = g.sum(weighted);
        g.backward(loss)?;
        let analytic: Vec<Vec<f32>> = vars
            .iter()
            .zip(&inputs)
            .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
            .collect();

        let eval = |inputs: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
            let out = build(&mut g, &vars)?;
            Ok(projected(&g, out, &r))
        };
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            coords_checked: 0,
        };
        let eps = self.epsilon;
        for i in 0..inputs.len() {
            let n = inputs[i].numel();
            let step = n.div_ceil(self.max_coords.max(1)).max(1);
            for k in (0..n).step_by(step) {
                let orig = inputs[i].data()[k];
                inputs[i].data_mut()[k] = orig + eps;
                let plus = eval(&inputs)?;
                inputs[i].data_mut()[k] = orig - eps;
                let minus = eval(&inputs)?;
                inputs[i].data_mut()[k] = orig;
                // Use the perturbation actually representable in f32.
                let h = f64::from(orig + eps) - f64::from(orig - eps);
                let numeric = (plus - minus) / h;
                let a = f64::from(analytic[i][k]);
                let denom = a.abs().max(numeric.abs()).max(self.floor);
                let rel = (a - numeric).abs() / denom;
                if !rel.is_finite() {
                    return Err(SparcError::Validation(format!("non-finite gradient at input {i}[{k}]")));
                }
                report.max_rel_error = report.max_rel_error.max(rel);
                report.coords_checked += 1;
            }
        }
        Ok(report)
    }
}

/// Result of auditing one operation on one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct OpAudit {
    pub op: &'static str,
    pub case: String,
    pub report: GradCheckReport,
}

fn uniform(shape: &[usize], seed: u64, away_from_zero: bool) -> Tensor {
    let mut rng = substream(seed, "gradcheck-input", 0);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(-1.0..1.0);
            // Keep clear of the ReLU kink so ±ε never straddles it.
            if away_from_zero {
                v.signum() * (v.abs() + 0.1)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent")
}

/// Finite-difference audit of every differentiable graph operation on five
/// shapes each.
pub fn audit_operations(check: &GradCheck) -> Result<Vec<OpAudit>> {
    let mut out = Vec::new();
    let mut seed = 1000u64;
    let mut next = || {
        seed += 1;
        seed
    };
    let mut push = |op: &'static str, case: String, report: GradCheckReport| out.push(OpAudit { op, case, report });

    for (shape, k, stride, pad) in [
        ([2, 3, 5, 5], 3, 1, 1),
        ([1, 2, 6, 6], 3, 2, 1),
        ([2, 1, 4, 7], 1, 1, 0),
        ([1, 4, 7, 5], 5, 1, 2),
        ([3, 2, 6, 6], 3, 2, 0),
    ] {
        let x = uniform(&shape, next(), false);
        let f = uniform(&[shape[1], k, k], next(), false);
        let r = check.run(&[x, f], |g, v| g.conv_depthwise(v[0], v[1], stride, pad))?;
        push("conv_depthwise", format!("{shape:?} k{k} s{stride} p{pad}"), r);
    }
    for (b, m, n, hw) in [(2, 3, 4, 3), (1, 5, 2, 4), (3, 1, 3, 2), (2, 4, 4, 1), (1, 6, 5, 3)] {
        let x = uniform(&[b, m, hw, hw], next(), false);
        let f = uniform(&[m, n], next(), false);
        let r = check.run(&[x, f], |g, v| g.conv_pointwise(v[0], v[1]))?;
        push("conv_pointwise", format!("[{b}, {m}, {hw}, {hw}] -> {n}"), r);
    }
    for (b, c1, c2, hw) in [(2, 2, 3, 3), (1, 1, 1, 4), (3, 4, 2, 2), (1, 3, 3, 1), (2, 5, 1, 3)] {
        let a = uniform(&[b, c1, hw, hw], next(), false);
        let c = uniform(&[b, c2, hw, hw], next(), false);
        let r = check.run(&[a, c], |g, v| g.concat_channels(v[0], v[1]))?;
        push("concat_channels", format!("{c1}+{c2} ch, {b}x{hw}x{hw}"), r);
    }
    let elementwise: [&[usize]; 5] = [&[7], &[2, 3], &[2, 3, 4], &[1, 2, 3, 3], &[3, 1, 2, 5]];
    for shape in elementwise {
        let x = uniform(shape, next(), true);
        push("relu", format!("{shape:?}"), check.run(&[x], |g, v| Ok(g.relu(v[0])))?);
        let (a, b) = (uniform(shape, next(), false), uniform(shape, next(), false));
        push(
            "add",
            format!("{shape:?}"),
            check.run(&[a, b], |g, v| g.add(v[0], v[1]))?,
        );
        let (a, b) = (uniform(shape, next(), false), uniform(shape, next(), false));
        push(
            "mul",
            format!("{shape:?}"),
            check.run(&[a, b], |g, v| g.mul(v[0], v[1]))?,
        );
        let x = uniform(shape, next(), false);
        push(
            "scale",
            format!("{shape:?}"),
            check.run(&[x], |g, v| Ok(g.scale(v[0], -1.7)))?,
        );
        let x = uniform(shape, next(), false);
        push("sum", format!("{shape:?}"), check.run(&[x], |g, v| Ok(g.sum(v[0])))?);
    }
    for shape in [[2, 3, 4, 4], [1, 1, 3, 5], [3, 2, 1, 1], [2, 4, 2, 3], [1, 5, 6, 6]] {
        let x = uniform(&shape, next(), false);
        push(
            "global_avg_pool",
            format!("{shape:?}"),
            check.run(&[x], |g, v| g.global_avg_pool(v[0]))?,
        );
    }
    for (b, d, c) in [(2, 3, 4), (1, 5, 2), (4, 2, 3), (3, 6, 6), (1, 1, 1)] {
        let (x, w, bias) = (
            uniform(&[b, d], next(), false),
            uniform(&[d, c], next(), false),
            uniform(&[c], next(), false),
        );
        push(
            "linear",
            format!("[{b}, {d}] -> {c}"),
            check.run(&[x, w, bias], |g, v| g.linear(v[0], v[1], v[2]))?,
        );
    }
    for shape in [[4, 2, 3, 3], [2, 3, 2, 2], [8, 1, 1, 1], [3, 4, 2, 3], [2, 2, 4, 4]] {
        let c = shape[1];
        let x = uniform(&shape, next(), false);
        let gamma = uniform(&[c], next(), false);
        let beta = uniform(&[c], next(), false);
        let r = check.run(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
        })?;
        push("batch_norm_train", format!("{shape:?}"), r);
        let mean: Vec<f32> = uniform(&[c], next(), false).data().to_vec();
        let var: Vec<f32> = uniform(&[c], next(), false)
            .data()
            .iter()
            .map(|v| 0.5 + v.abs())
            .collect();
        let r = check.run(&[x, gamma, beta], |g, v| {
            g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
        })?;
        push("batch_norm_eval", format!("{shape:?}"), r);
    }
    for (shape, stride, out_c) in [
        ([2, 2, 4, 4], 2, 4),
        ([1, 3, 5, 5], 2, 6),
        ([2, 1, 3, 3], 1, 3),
        ([1, 2, 6, 4], 2, 2),
        ([3, 2, 2, 2], 1, 5),
    ] {
        let x = uniform(&shape, next(), false);
        let r = check.run(&[x], |g, v| g.downsample_pad(v[0], stride, out_c))?;
        push("downsample_pad", format!("{shape:?} s{stride} -> {out_c}"), r);
    }
    for (b, c) in [(1, 2), (3, 4), (5, 3), (2, 10), (4, 1)] {
        let z = uniform(&[b, c], next(), false);
        let labels: Vec<usize> = (0..b).map(|i| (i * 7) % c).collect();
        let r = check.run(&[z], |g, v| g.softmax_cross_entropy(v[0], &labels))?;
        push("softmax_cross_entropy", format!("[{b}, {c}]"), r);
    }
    Ok(out)
}
