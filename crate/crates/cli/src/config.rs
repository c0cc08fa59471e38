//! Flat `key = value` experiment configuration.
//!
//! Defaults are applied first, then a config file, then command-line
//! overrides; the result is validated once at the end. Unknown keys are
//! rejected and every error names the offending key.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sparc_core::engine::TrainConfig;
use sparc_core::model::{ArchConfig, Isolation, ShortcutKind};

use crate::error::{CliError, Result};

/// Procedurally generated dataset: `classes=K,n=N,size=S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Samples per class before the 80/20 train/test split.
    pub samples_per_class: usize,
    pub size: usize,
}

impl Default for SyntheticSpec {
    /// 10 classes of 16×16 images, 200 train and 50 test samples each.
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            samples_per_class: 250,
            size: 16,
        }
    }
}

impl FromStr for SyntheticSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let err = |m: String| CliError::config("synthetic", m);
        let (mut classes, mut n, mut size) = (None, None, None);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {part:?}")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| err(format!("{:?} is not a non-negative integer", v.trim())))?;
            let slot = match k.trim() {
                "classes" => &mut classes,
                "n" => &mut n,
                "size" => &mut size,
                other => return Err(err(format!("unknown field {other:?} (classes, n, size)"))),
            };
            *slot = Some(v);
        }
        match (classes, n, size) {
            (Some(classes), Some(samples_per_class), Some(size)) => Ok(SyntheticSpec {
                classes,
                samples_per_class,
                size,
            }),
            _ => Err(err(format!("{s:?} must set classes, n and size"))),
        }
    }
}

impl fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "classes={},n={},size={}",
            self.classes, self.samples_per_class, self.size
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Directory holding `train.spds` and `test.spds`.
    Dir(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub width_factor: f64,
    pub depth: usize,
    /// Filters each task owns per layer (the layer widths); derived from
    /// `width_factor` and `depth` when unset, checked against them when set.
    pub filters_per_task: Option<Vec<usize>>,
    pub alpha: f32,
    pub kappa: f32,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub num_tasks: usize,
    pub seed: u64,
    pub source: DataSource,
    /// Replay capacity of the ER baseline.
    pub buffer_size: usize,
    pub shortcut: ShortcutKind,
    pub isolation: Isolation,
    pub renormalize: bool,
    /// Write the trained model to `model.sprc`.
    pub checkpoint: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            width_factor: 0.5,
            depth: 4,
            filters_per_task: None,
            alpha: 0.99,
            kappa: 5.0,
            learning_rate: 0.005,
            batch_size: 32,
            epochs: 50,
            num_tasks: 5,
            seed: 0,
            source: DataSource::Synthetic(SyntheticSpec::default()),
            buffer_size: 200,
            shortcut: ShortcutKind::Pad,
            isolation: Isolation::Split,
            renormalize: true,
            checkpoint: false,
        }
    }
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "width_factor",
    "depth",
    "filters_per_task",
    "alpha",
    "kappa",
    "learning_rate",
    "batch_size",
    "epochs",
    "num_tasks",
    "seed",
    "data",
    "synthetic",
    "buffer_size",
    "shortcut",
    "isolation",
    "renormalize",
    "checkpoint",
];

fn number<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::config(key, format!("{value:?} is not a valid number")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::config(key, format!("{value:?} is not a boolean"))),
    }
}

impl ExperimentConfig {
    /// Set one key from its textual value. Range checks happen in
    /// [`ExperimentConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "width_factor" => self.width_factor = number(key, value)?,
            "depth" => self.depth = number(key, value)?,
            "filters_per_task" => {
                let list = value
                    .split(',')
                    .map(|v| number::<usize>(key, v.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.filters_per_task = Some(list);
            }
            "alpha" => self.alpha = number(key, value)?,
            "kappa" => self.kappa = number(key, value)?,
            "learning_rate" => self.learning_rate = number(key, value)?,
            "batch_size" => self.batch_size = number(key, value)?,
            "epochs" => self.epochs = number(key, value)?,
            "num_tasks" => self.num_tasks = number(key, value)?,
            "seed" => self.seed = number(key, value)?,
            "data" => {
                if value.is_empty() {
                    return Err(CliError::config(key, "empty path"));
                }
                self.source = DataSource::Dir(PathBuf::from(value));
            }
            "synthetic" => self.source = DataSource::Synthetic(value.parse()?),
            "buffer_size" => self.buffer_size = number(key, value)?,
            "shortcut" => {
                self.shortcut = match value {
                    "pad" => ShortcutKind::Pad,
                    "projection" => ShortcutKind::Projection,
                    _ => {
                        return Err(CliError::config(
                            key,
                            format!("{value:?} is not one of pad, projection"),
                        ))
                    }
                }
            }
            "isolation" => {
                self.isolation = match value {
                    "split" => Isolation::Split,
                    "complete" => Isolation::Complete,
                    _ => {
                        return Err(CliError::config(
                            key,
                            format!("{value:?} is not one of split, complete"),
                        ))
                    }
                }
            }
            "renormalize" => self.renormalize = boolean(key, value)?,
            "checkpoint" => self.checkpoint = boolean(key, value)?,
            _ => {
                return Err(CliError::config(
                    key,
                    format!("unknown key (accepted: {})", KEYS.join(", ")),
                ))
            }
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then overrides; validated.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, m: String| Err(CliError::config(key, m));
        if !(self.width_factor > 0.0 && self.width_factor.is_finite()) {
            return bad("width_factor", format!("must be > 0, got {}", self.width_factor));
        }
        if self.depth == 0 {
            return bad("depth", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", format!("must be in [0, 1], got {}", self.alpha));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad("kappa", format!("must be > 0, got {}", self.kappa));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be > 0, got {}", self.learning_rate));
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("num_tasks", self.num_tasks),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1".into());
            }
        }
        if let DataSource::Synthetic(s) = &self.source {
            if s.classes < 2 || s.samples_per_class < 2 || s.size < 4 {
                return bad("synthetic", format!("{s} needs classes >= 2, n >= 2 and size >= 4"));
            }
            if s.classes % self.num_tasks != 0 {
                return bad(
                    "num_tasks",
                    format!("{} does not divide {} classes", self.num_tasks, s.classes),
                );
            }
        }
        if let Some(f) = &self.filters_per_task {
            let derived = self.derived_filters_per_task()?;
            if *f != derived {
                return bad(
                    "filters_per_task",
                    format!("{f:?} disagrees with width_factor/depth, which give {derived:?}"),
                );
            }
        }
        Ok(())
    }

    fn derived_filters_per_task(&self) -> Result<Vec<usize>> {
        Ok(ArchConfig::from_width(self.width_factor, self.depth, 1)?.widths)
    }

    /// Backbone for images with `in_channels` channels.
    pub fn arch(&self, in_channels: usize) -> Result<ArchConfig> {
        let arch = ArchConfig {
            shortcut: self.shortcut,
            isolation: self.isolation,
            ..ArchConfig::from_width(self.width_factor, self.depth, in_channels)?
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            kappa: self.kappa,
            renormalize: self.renormalize,
            seed: self.seed,
        }
    }

    /// Every key with its value, in a form [`ExperimentConfig::parse_str`]
    /// reads back to an identical config.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("width_factor", &self.width_factor);
        kv("depth", &self.depth);
        kv("alpha", &self.alpha);
        kv("kappa", &self.kappa);
        kv("learning_rate", &self.learning_rate);
        kv("batch_size", &self.batch_size);
        kv("epochs", &self.epochs);
        kv("num_tasks", &self.num_tasks);
        kv("seed", &self.seed);
        match &self.source {
            DataSource::Dir(p) => kv("data", &p.display()),
            DataSource::Synthetic(spec) => kv("synthetic", spec),
        }
        kv("buffer_size", &self.buffer_size);
        kv(
            "shortcut",
            &match self.shortcut {
                ShortcutKind::Pad => "pad",
                ShortcutKind::Projection => "projection",
            },
        );
        kv(
            "isolation",
            &match self.isolation {
                Isolation::Split => "split",
                Isolation::Complete => "complete",
            },
        );
        kv("renormalize", &self.renormalize);
        kv("checkpoint", &self.checkpoint);
        if let Some(f) = &self.filters_per_task {
            kv("filters_per_task", &join(f));
        } else if let Ok(f) = self.derived_filters_per_task() {
            let _ = writeln!(s, "# filters_per_task = {} (derived)", join(&f));
        }
        s
    }
}

fn join<T: fmt::Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
