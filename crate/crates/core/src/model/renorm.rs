//! Activation-derived re-normalization of a task's classifier head.

use crate::error::{Result, SparcError};
use crate::layers::ClassifierHead;
use crate::tensor::Tensor;

/// Per-sample maxima of the current task's head outputs, collected over the
/// final training epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationRecord {
    values: Vec<f32>,
}

impl ActivationRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: Vec<f32>) -> Self {
        ActivationRecord { values }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Append the row maxima of `logits: [B, C]`.
    pub fn record(&mut self, logits: &Tensor) -> Result<()> {
        let c = match logits.shape() {
            [_, c] if *c > 0 => *c,
            s => {
                return Err(SparcError::dim(
                    "record_activations",
                    format!("logits must be [B,C>0], got {s:?}"),
                ))
            }
        };
        self.values.extend(
            logits
                .data()
                .chunks(c)
                .map(|row| row.iter().fold(f32::NEG_INFINITY, |a, v| a.max(*v))),
        );
        Ok(())
    }
}

/// Quantile of ascending-sorted data by linear interpolation between order
/// statistics at position `(n - 1) * q`.
pub fn quartile(sorted: &[f32], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quartile of empty data");
    let pos = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    f64::from(sorted[lo]) + (f64::from(sorted[hi]) - f64::from(sorted[lo])) * frac
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RenormOutcome {
    /// Weights and bias were multiplied by `scale = kappa / eta`.
    Applied { q1: f64, q3: f64, eta: f32, scale: f32 },
    /// No usable `eta` (none under the fence, or `eta <= 0`); head unchanged.
    Skipped { q1: f64, q3: f64 },
}

impl RenormOutcome {
    pub fn scale(&self) -> f32 {
        match self {
            RenormOutcome::Applied { scale, .. } => *scale,
            RenormOutcome::Skipped { .. } => 1.0,
        }
    }
}

/// Rescale `W` and `B` by `kappa / eta`, where `eta` is the largest recorded
/// activation not above `Q3 + IQR`.
pub fn renormalize_head(head: &mut ClassifierHead, record: &ActivationRecord, kappa: f32) -> Result<RenormOutcome> {
    if record.is_empty() {
        return Err(SparcError::State("activation record is empty".into()));
    }
    if kappa.is_nan() || kappa <= 0.0 {
        return Err(SparcError::Validation(format!("kappa must be positive, got {kappa}")));
    }
    let mut sorted = record.values().to_vec();
    sorted.sort_by(f32::total_cmp);
    let q1 = quartile(&sorted, 0.25);
    let q3 = quartile(&sorted, 0.75);
    let fence = q3 + (q3 - q1);
    let eta = sorted.iter().rev().find(|a| f64::from(**a) <= fence).copied();
    let Some(eta) = eta.filter(|e| *e > 0.0) else {
        return Ok(RenormOutcome::Skipped { q1, q3 });
    };
    let scale = kappa / eta;
    for v in head.weight.data_mut().iter_mut().chain(head.bias.data_mut().iter_mut()) {
        *v *= scale;
    }
    Ok(RenormOutcome::Applied { q1, q3, eta, scale })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(weight: Vec<f32>, bias: Vec<f32>) -> ClassifierHead {
        let c = bias.len();
        ClassifierHead {
            weight: Tensor::parameter(vec![weight.len() / c, c], weight).unwrap(),
            bias: Tensor::parameter(vec![c], bias).unwrap(),
            class_offset: 0,
        }
    }

    /// Independent quantile: sort, then interpolate by hand-derived ranks.
    fn oracle_quantile(values: &[f32], q: f64) -> f64 {
        let mut v: Vec<f64> = values.iter().map(|x| f64::from(*x)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let h = (v.len() as f64 - 1.0) * q;
        let below = v[h as usize];
        let above = v[(h as usize + 1).min(v.len() - 1)];
        below + (h - h.trunc()) * (above - below)
    }

    #[test]
    fn records_row_maxima() {
        let mut r = ActivationRecord::new();
        r.record(&Tensor::new(vec![1, 3], vec![1.0, 5.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!(r.values(), &[5.0]);
        r.record(&Tensor::new(vec![4, 2], vec![0.0; 8]).unwrap()).unwrap();
        assert_eq!(r.len(), 5);
    }

    #[test]
    fn constant_record_leaves_head_unchanged() {
        let mut h = head(vec![1.5, -2.0], vec![0.25]);
        let out = renormalize_head(&mut h, &ActivationRecord::from_values(vec![5.0; 4]), 5.0).unwrap();
        assert!(matches!(out, RenormOutcome::Applied { eta, scale, .. } if eta == 5.0 && scale == 1.0));
        assert_eq!(h.weight.data(), &[1.5, -2.0]);
        assert_eq!(h.bias.data(), &[0.25]);
    }

    #[test]
    fn worked_example_excludes_outlier() {
        let values = vec![2.0, 4.0, 6.0, 8.0, 100.0];
        assert_eq!(oracle_quantile(&values, 0.25), 4.0);
        assert_eq!(oracle_quantile(&values, 0.75), 8.0);
        let mut h = head(vec![1.6, 3.2], vec![0.8, 1.6]);
        let out = renormalize_head(&mut h, &ActivationRecord::from_values(values), 5.0).unwrap();
        match out {
            RenormOutcome::Applied { q1, q3, eta, scale } => {
                assert_eq!((q1, q3, eta), (4.0, 8.0, 8.0));
                assert_eq!(scale, 5.0 / 8.0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!((h.weight.data()[0] - 1.0).abs() < 1e-6);
        assert!((h.weight.data()[1] - 2.0).abs() < 1e-6);
        assert!((h.bias.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_positive_eta_is_skipped() {
        let mut h = head(vec![1.0, 2.0], vec![0.0, 0.0]);
        let out = renormalize_head(&mut h, &ActivationRecord::from_values(vec![-3.0, -2.0, -1.0]), 5.0).unwrap();
        assert!(matches!(out, RenormOutcome::Skipped { .. }));
        assert_eq!(h.weight.data(), &[1.0, 2.0]);
    }

    #[test]
    fn empty_record_is_a_state_error() {
        let mut h = head(vec![1.0], vec![0.0]);
        let err = renormalize_head(&mut h, &ActivationRecord::new(), 5.0).unwrap_err();
        assert!(matches!(err, SparcError::State(_)));
    }

    proptest::proptest! {
        #[test]
        fn quartile_matches_oracle(values in proptest::collection::vec(-100.0f32..100.0, 1..40), q in 0.0f64..=1.0) {
            let mut sorted = values.clone();
            sorted.sort_by(f32::total_cmp);
            let got = quartile(&sorted, q);
            let want = oracle_quantile(&values, q);
            proptest::prop_assert!((got - want).abs() < 1e-9);
        }
    }
}
