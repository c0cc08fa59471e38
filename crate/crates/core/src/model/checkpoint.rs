//! Binary checkpoint format.
//!
//! ```text
//! "SPRC" | version u32 | arch block | task count u32
//! per task: classes u32 | class offset u32 | frozen u8 | record count u32 | records
//! shared:   frozen u8 | record count u32 | records
//! record:   name len u32 | name | rank u32 | dims u32.. | f32 values
//! arch:     in_channels u32 | kernel u32 | blocks/layer u32 | shortcut u8 |
//!           isolation u8 | depth u32 | widths u32.. | alpha f32 | seed u64
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::{ArchConfig, Isolation, SemanticMemory, ShortcutKind, SparcModel, WorkingMemory};
use crate::error::{Result, SparcError};
use crate::rng::substream;

const MAGIC: &[u8; 4] = b"SPRC";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn record(&mut self, name: &str, shape: &[usize], values: &[f32]) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(shape.len() as u32);
        for d in shape {
            self.u32(*d as u32);
        }
        for v in values {
            self.f32(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> SparcError {
        SparcError::Format {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of data, wanted {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| SparcError::Format {
                offset: at,
                message: "record name is not UTF-8".into(),
            })?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.err(format!("implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(4) > self.buf.len() - self.pos {
            return Err(self.err(format!("record {name} claims {n} values past end of data")));
        }
        let values = (0..n).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        Ok((name, shape, values))
    }
}

fn task_records(wm: &WorkingMemory) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out: Vec<_> = wm
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (i, bn) in wm.batch_norms().into_iter().enumerate() {
        let c = bn.channels();
        out.push((format!("bn{i}.running_mean"), vec![c], bn.running_mean.clone()));
        out.push((format!("bn{i}.running_var"), vec![c], bn.running_var.clone()));
    }
    out
}

fn write_task(w: &mut Writer, wm: &WorkingMemory) {
    w.u32(wm.num_classes() as u32);
    w.u32(wm.head.class_offset as u32);
    w.u8(u8::from(wm.is_frozen()));
    let recs = task_records(wm);
    w.u32(recs.len() as u32);
    for (n, s, v) in &recs {
        w.record(n, s, v);
    }
}

/// Serialized parameters and running moments of one task, for byte-level
/// isolation audits.
pub fn task_bytes(model: &SparcModel, t: usize) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    write_task(&mut w, model.task(t)?);
    Ok(w.0)
}

pub fn model_to_bytes(model: &SparcModel) -> Vec<u8> {
    let arch = model.arch();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(arch.in_channels as u32);
    w.u32(arch.kernel as u32);
    w.u32(arch.blocks_per_layer as u32);
    w.u8(match arch.shortcut {
        ShortcutKind::Pad => 0,
        ShortcutKind::Projection => 1,
    });
    w.u8(match arch.isolation {
        Isolation::Split => 0,
        Isolation::Complete => 1,
    });
    w.u32(arch.widths.len() as u32);
    for width in &arch.widths {
        w.u32(*width as u32);
    }
    w.f32(model.alpha());
    w.u64(model.seed());
    w.u32(model.num_tasks() as u32);
    for wm in model.tasks() {
        write_task(&mut w, wm);
    }
    let semantic = model.semantic();
    w.u8(u8::from(!semantic.filters.is_empty() && semantic.is_frozen()));
    let shared: Vec<_> = semantic
        .filters
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.as_ref().map(|t| (i, t)))
        .collect();
    w.u32(shared.len() as u32);
    for (i, t) in shared {
        w.record(&format!("shared.unit{i}"), t.shape(), t.data());
    }
    w.0
}

fn fill(
    r: &Reader<'_>,
    slot_name: &str,
    slot_shape: &[usize],
    dst: &mut [f32],
    rec: &(String, Vec<usize>, Vec<f32>),
) -> Result<()> {
    if rec.0 != slot_name || rec.1 != slot_shape {
        return Err(r.err(format!(
            "expected record {slot_name} {slot_shape:?}, found {} {:?}",
            rec.0, rec.1
        )));
    }
    dst.copy_from_slice(&rec.2);
    Ok(())
}

fn read_task(r: &mut Reader<'_>, arch: &ArchConfig) -> Result<WorkingMemory> {
    let classes = r.u32()? as usize;
    let offset = r.u32()? as usize;
    let frozen = r.u8()? != 0;
    let count = r.u32()? as usize;
    if classes == 0 {
        return Err(r.err("task with zero classes"));
    }
    // Structure comes from the architecture; values from the records.
    let mut wm = WorkingMemory::init(&mut substream(0, "checkpoint", 0), arch, classes, offset);
    let names: Vec<(String, Vec<usize>)> = wm
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let n_bn = wm.batch_norms().len();
    if count != names.len() + 2 * n_bn {
        return Err(r.err(format!(
            "task has {count} records, architecture needs {}",
            names.len() + 2 * n_bn
        )));
    }
    for ((name, shape), t) in names.iter().zip(wm.params_mut()) {
        let rec = r.record()?;
        fill(r, name, shape, t.data_mut(), &rec)?;
    }
    for (i, bn) in wm.batch_norms_mut().into_iter().enumerate() {
        let c = bn.channels();
        let rec = r.record()?;
        fill(r, &format!("bn{i}.running_mean"), &[c], &mut bn.running_mean, &rec)?;
        let rec = r.record()?;
        fill(r, &format!("bn{i}.running_var"), &[c], &mut bn.running_var, &rec)?;
    }
    if frozen {
        wm.freeze();
    }
    Ok(wm)
}

pub fn model_from_bytes(buf: &[u8]) -> Result<SparcModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(SparcError::Format {
            offset: 0,
            message: "bad magic, not an SPRC checkpoint".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let in_channels = r.u32()? as usize;
    let kernel = r.u32()? as usize;
    let blocks_per_layer = r.u32()? as usize;
    let shortcut = match r.u8()? {
        0 => ShortcutKind::Pad,
        1 => ShortcutKind::Projection,
        v => return Err(r.err(format!("unknown shortcut kind {v}"))),
    };
    let isolation = match r.u8()? {
        0 => Isolation::Split,
        1 => Isolation::Complete,
        v => return Err(r.err(format!("unknown isolation kind {v}"))),
    };
    let depth = r.u32()? as usize;
    if depth > 64 {
        return Err(r.err(format!("implausible depth {depth}")));
    }
    let widths = (0..depth)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let arch = ArchConfig {
        in_channels,
        widths,
        blocks_per_layer,
        kernel,
        shortcut,
        isolation,
    };
    arch.validate()
        .map_err(|e| r.err(format!("invalid architecture: {e}")))?;
    let alpha = r.f32()?;
    let seed = r.u64()?;
    let n_tasks = r.u32()? as usize;
    let mut tasks = Vec::with_capacity(n_tasks.min(1024));
    for _ in 0..n_tasks {
        tasks.push(read_task(&mut r, &arch)?);
    }
    let shared_frozen = r.u8()? != 0;
    let n_shared = r.u32()? as usize;
    let shapes = arch.shared_shapes();
    let mut semantic = SemanticMemory {
        filters: vec![None; shapes.len()],
        alpha,
    };
    if n_tasks > 0 {
        semantic = SemanticMemory::init(&mut substream(0, "checkpoint", 1), &arch, alpha);
        let expected = shapes.iter().flatten().count();
        if n_shared != expected {
            return Err(r.err(format!("{n_shared} shared records, architecture needs {expected}")));
        }
        for (i, slot) in semantic.filters.iter_mut().enumerate() {
            let Some(t) = slot else { continue };
            let rec = r.record()?;
            let shape = t.shape().to_vec();
            fill(&r, &format!("shared.unit{i}"), &shape, t.data_mut(), &rec)?;
        }
        if shared_frozen {
            semantic.freeze();
        }
    } else if n_shared != 0 {
        return Err(r.err("shared records present in a model without tasks"));
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let mut model = SparcModel::new(arch.clone(), alpha, seed).map_err(|e| r.err(e.to_string()))?;
    let (sem, ts) = model.parts_mut();
    *sem = semantic;
    *ts = tasks;
    Ok(model)
}

pub fn save_model(model: &SparcModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SparcModel> {
    model_from_bytes(&std::fs::read(path)?)
}
