//! Procedural class-conditional Gaussian-blob images.
//!
//! Every class draws a template of a few Gaussian blobs with random centres
//! and widths from its own random substream. A sample renders the template
//! with every blob jittered by up to one pixel, takes the per-pixel maximum
//! over blobs, adds Gaussian noise and clips to `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::data::Dataset;
use crate::error::{Result, SparcError};
use crate::rng::substream;

const BLOBS_PER_CLASS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    /// Samples per class before the train/test split.
    pub samples_per_class: usize,
    /// Square image side.
    pub size: usize,
    /// Fraction of each class routed to the training set.
    pub train_fraction: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
}

impl BlobSpec {
    pub fn new(classes: usize, samples_per_class: usize, size: usize) -> Self {
        BlobSpec {
            classes,
            samples_per_class,
            size,
            train_fraction: 0.8,
            noise: 0.15,
        }
    }
}

/// Generate a `(train, test)` pair; deterministic per seed.
pub fn generate_blobs(spec: &BlobSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.classes > usize::from(u16::MAX) {
        return Err(SparcError::Validation(format!(
            "need 2..=65535 classes, got {}",
            spec.classes
        )));
    }
    if spec.size < 4 || spec.samples_per_class < 2 {
        return Err(SparcError::Validation(
            "image size must be ≥ 4 and ≥ 2 samples per class".into(),
        ));
    }
    if !(0.0..1.0).contains(&spec.train_fraction) || spec.noise < 0.0 {
        return Err(SparcError::Validation(
            "train fraction must be in [0, 1) and noise non-negative".into(),
        ));
    }
    let s = spec.size;
    let n_train =
        ((spec.samples_per_class as f64 * spec.train_fraction).round() as usize).min(spec.samples_per_class - 1);
    let noise = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("finite std");
    let mut train = Dataset::new(1, s, s, spec.classes, Vec::new(), Vec::new())?;
    let mut test = train.clone();
    let mut img = vec![0.0f32; s * s];
    for c in 0..spec.classes {
        let mut rng = substream(seed, "synthetic", c as u64);
        // Class template: a few blobs with class-specific centres and widths.
        let template: Vec<(f32, f32, f32)> = (0..BLOBS_PER_CLASS)
            .map(|_| {
                let cy = rng.random_range(2.0..s as f32 - 3.0);
                let cx = rng.random_range(2.0..s as f32 - 3.0);
                let sigma = s as f32 * rng.random_range(0.05f32..0.16);
                (cy, cx, sigma)
            })
            .collect();
        for i in 0..spec.samples_per_class {
            let jy = rng.random_range(-1.0f32..=1.0);
            let jx = rng.random_range(-1.0f32..=1.0);
            for y in 0..s {
                for x in 0..s {
                    let mut v = 0.0f32;
                    for (cy, cx, sigma) in &template {
                        let d2 = (y as f32 - cy - jy).powi(2) + (x as f32 - cx - jx).powi(2);
                        v = v.max((-d2 / (2.0 * sigma * sigma)).exp());
                    }
                    if spec.noise > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    img[y * s + x] = v.clamp(0.0, 1.0);
                }
            }
            let dst = if i < n_train { &mut train } else { &mut test };
            dst.push(&img, c as u16)?;
        }
    }
    Ok((train, test))
}
