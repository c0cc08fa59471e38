//! In-memory image datasets and the SPDS binary format.
//!
//! ```text
//! "SPDS" | version u32 | samples u32 | channels u32 | height u32 | width u32 |
//! classes u32 | labels u16 x samples | pixels f32 x samples*channels*height*width
//! ```
//!
//! Little-endian throughout; pixels are sample-major, row-major, in `[0, 1]`.

use std::path::Path;

use crate::error::{Result, SparcError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SPDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    images: Vec<f32>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        images: Vec<f32>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 {
            return Err(SparcError::Validation("images must have non-zero size".into()));
        }
        if images.len() != per * labels.len() {
            return Err(SparcError::Validation(format!(
                "{} pixels for {} samples of {per} values",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| usize::from(**l) >= num_classes) {
            return Err(SparcError::Validation(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            num_classes,
            images,
            labels,
        })
    }

    /// Empty dataset with the same geometry.
    pub fn empty_like(&self) -> Self {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            ..self.clone()
        }
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u16 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn push(&mut self, image: &[f32], label: u16) -> Result<()> {
        if image.len() != self.sample_len() || usize::from(label) >= self.num_classes {
            return Err(SparcError::Validation(format!(
                "sample of {} values / label {label} does not fit dataset",
                image.len()
            )));
        }
        self.images.extend_from_slice(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = self.empty_like();
        for &i in indices {
            out.images.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Stack the given samples into a `[B, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data).expect("consistent geometry")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.len() + 4 * self.images.len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.len() as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for p in &self.images {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| SparcError::Format { offset, message };
        if buf.len() < HEADER_LEN {
            return Err(fmt(buf.len(), format!("header needs {HEADER_LEN} bytes")));
        }
        if &buf[..4] != MAGIC {
            return Err(fmt(0, "bad magic, not an SPDS dataset".into()));
        }
        let field = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        if field(0) != VERSION as usize {
            return Err(fmt(4, format!("unsupported version {}", field(0))));
        }
        let (n, c, h, w, k) = (field(1), field(2), field(3), field(4), field(5));
        let per = c * h * w;
        let expected = HEADER_LEN + 2 * n + 4 * n * per;
        if buf.len() != expected {
            return Err(fmt(
                buf.len().min(expected),
                format!("expected {expected} bytes, found {}", buf.len()),
            ));
        }
        let mut pos = HEADER_LEN;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = u16::from_le_bytes([buf[pos], buf[pos + 1]]);
            if usize::from(l) >= k {
                return Err(fmt(pos, format!("label {l} out of range for {k} classes")));
            }
            labels.push(l);
            pos += 2;
        }
        let mut images = Vec::with_capacity(n * per);
        for _ in 0..n * per {
            let v = f32::from_le_bytes(buf[pos..pos + 4].try_into().expect("4 bytes"));
            if !(0.0..=1.0).contains(&v) {
                return Err(fmt(pos, format!("pixel {v} outside [0, 1]")));
            }
            images.push(v);
            pos += 4;
        }
        Dataset::new(c, h, w, k, images, labels)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(1, 2, 2, 3, vec![0.0, 0.25, 0.5, 1.0, 1.0, 0.5, 0.25, 0.0], vec![2, 0]).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let d = tiny();
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"SPDS");
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);
    }

    #[test]
    fn rejects_truncation_and_bad_labels() {
        let bytes = tiny().to_bytes();
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 1]),
            Err(SparcError::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[HEADER_LEN] = 9;
        assert!(matches!(Dataset::from_bytes(&bad), Err(SparcError::Format { offset, .. }) if offset == HEADER_LEN));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Dataset::from_bytes(&magic).is_err());
    }

    #[test]
    fn batch_stacks_samples() {
        let d = tiny();
        let t = d.batch(&[1, 0]);
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(&t.data()[..4], d.image(1));
    }
}
