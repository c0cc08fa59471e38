//! The `generate`, `train`, `baseline`, `ablate` and `report` commands and
//! the artifacts they write.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sparc_core::engine::{
    generate_blobs, run_baseline, run_sparc, split_dataset, BaselineKind, BlobSpec, Dataset, TaskStream,
};
use sparc_core::metrics::{stability_trace, task_probabilities, AccuracyMatrix, MatrixSummary};
use sparc_core::model::{analytic_census, save_model, task_bytes, ArchConfig, Isolation, RenormOutcome, ShortcutKind};

use crate::config::{DataSource, ExperimentConfig, SyntheticSpec};
use crate::error::{CliError, Result};

pub const TRAIN_FILE: &str = "train.spds";
pub const TEST_FILE: &str = "test.spds";
pub const CONFIG_FILE: &str = "config.txt";
pub const CLASS_IL_FILE: &str = "class_il_matrix.csv";
pub const TASK_IL_FILE: &str = "task_il_matrix.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CENSUS_FILE: &str = "census.csv";
pub const LOSS_FILE: &str = "loss_traces.csv";
pub const PROBABILITY_FILE: &str = "task_probabilities.csv";
pub const HEAD_NORM_FILE: &str = "head_norms.csv";
pub const STABILITY_FILE: &str = "stability_trace.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const LOG_FILE: &str = "run.log";
pub const CHECKPOINT_FILE: &str = "model.sprc";

/// An output directory and the files written into it, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl RunArtifacts {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(RunArtifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Dataset::from_bytes(&bytes).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// The `(train, test)` pair named by the config.
pub fn load_data(source: &DataSource, seed: u64) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::Dir(dir) => Ok((
            read_dataset(&dir.join(TRAIN_FILE))?,
            read_dataset(&dir.join(TEST_FILE))?,
        )),
        DataSource::Synthetic(spec) => Ok(generate_blobs(&blob_spec(spec), seed)?),
    }
}

fn blob_spec(spec: &SyntheticSpec) -> BlobSpec {
    BlobSpec::new(spec.classes, spec.samples_per_class, spec.size)
}

/// Write a synthetic dataset as `train.spds` and `test.spds`.
pub fn cmd_generate(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<RunArtifacts> {
    let (train, test) = generate_blobs(&blob_spec(spec), seed)?;
    let mut art = RunArtifacts::create(out)?;
    art.write(TRAIN_FILE, train.to_bytes())?;
    art.write(TEST_FILE, test.to_bytes())?;
    Ok(art)
}

fn prepare(cfg: &ExperimentConfig) -> Result<(TaskStream, ArchConfig)> {
    let (train, test) = load_data(&cfg.source, cfg.seed)?;
    let stream = split_dataset(&train, &test, cfg.num_tasks, cfg.seed)?;
    let arch = cfg.arch(train.channels)?;
    Ok((stream, arch))
}

fn shortcut_name(kind: ShortcutKind) -> &'static str {
    match kind {
        ShortcutKind::Pad => "pad",
        ShortcutKind::Projection => "projection",
    }
}

/// How the architecture is counted, for the run log.
fn assumptions(arch: &ArchConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "stem: split depthwise-separable unit {} -> {} channels, {k}x{k} depthwise, stride 1, task batch norm, ReLU",
        arch.in_channels,
        arch.widths[0],
        k = arch.kernel
    );
    let _ = writeln!(
        s,
        "layers: widths {:?}, {} residual blocks per layer of two units each; the first block of every later layer has stride 2",
        arch.widths, arch.blocks_per_layer
    );
    let _ = writeln!(
        s,
        "shortcut: {} ({})",
        shortcut_name(arch.shortcut),
        match arch.shortcut {
            ShortcutKind::Pad => "parameter-free strided subsampling with zero channel padding",
            ShortcutKind::Projection => "task-specific strided pointwise projection when the shape changes",
        }
    );
    let _ = writeln!(
        s,
        "census: depthwise and task-specific pointwise filters, batch-norm gamma/beta and head weights/bias per task; shared pointwise filters once; running statistics excluded"
    );
    s
}

fn kv(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key} = {value}");
}

fn matrix_metrics(out: &mut String, class_il: &AccuracyMatrix, task_il: &AccuracyMatrix) -> Result<()> {
    MatrixSummary::compute(class_il)?.write_kv("class_il.", out);
    MatrixSummary::compute(task_il)?.write_kv("task_il.", out);
    Ok(())
}

fn probability_csv(probs: &[f64]) -> String {
    let mut s = String::from("task,probability\n");
    for (t, p) in probs.iter().enumerate() {
        let _ = writeln!(s, "{},{p}", t + 1);
    }
    s
}

fn stability_csv(class_il: &AccuracyMatrix, task_il: &AccuracyMatrix) -> Result<String> {
    let (c, t) = (stability_trace(class_il)?, stability_trace(task_il)?);
    let mut s = String::from("stage,class_il_stability,task_il_stability\n");
    for (i, (a, b)) in c.iter().zip(&t).enumerate() {
        let _ = writeln!(s, "after_task_{},{a},{b}", i + 2);
    }
    Ok(s)
}

/// Train SPARC over the configured stream and write every artifact.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    let start = Instant::now();
    let (stream, arch) = prepare(cfg)?;
    let run = run_sparc(&arch, cfg.alpha, &stream, &cfg.train_config())?;

    // Self-checks: frozen tasks are byte-identical to their snapshots, and
    // full retention leaves Task-IL accuracy untouched.
    for (t, snap) in run.frozen_snapshots.iter().enumerate() {
        if task_bytes(&run.model, t)? != *snap {
            return Err(CliError::Check(format!(
                "task {} parameters changed after it was frozen",
                t + 1
            )));
        }
    }
    if cfg.alpha == 1.0 {
        for t in 0..stream.len() {
            let first = run.task_il.get(t, t);
            if (t..stream.len()).any(|s| run.task_il.get(s, t) != first) {
                return Err(CliError::Check(format!(
                    "task {} Task-IL accuracy changed with alpha = 1",
                    t + 1
                )));
            }
        }
    }

    let mut art = RunArtifacts::create(out)?;
    art.write(CONFIG_FILE, cfg.echo())?;
    art.write(CLASS_IL_FILE, run.class_il.to_csv())?;
    art.write(TASK_IL_FILE, run.task_il.to_csv())?;

    let counts = run.model.class_counts();
    let census = run.model.count_parameters();
    let complete = analytic_census(
        &ArchConfig {
            isolation: Isolation::Complete,
            ..arch.clone()
        },
        &counts,
    );
    let probs = task_probabilities(&run.last.predicted_tasks, stream.len())?;

    let mut metrics = String::new();
    matrix_metrics(&mut metrics, &run.class_il, &run.task_il)?;
    for (t, p) in probs.iter().enumerate() {
        kv(&mut metrics, &format!("task_probability.task_{}", t + 1), p);
    }
    for (t, (before, after)) in run.head_norms_before.iter().zip(&run.head_norms_after).enumerate() {
        kv(&mut metrics, &format!("head_norm_before.task_{}", t + 1), before);
        kv(&mut metrics, &format!("head_norm_after.task_{}", t + 1), after);
    }
    for (t, r) in run.reports.iter().enumerate() {
        kv(
            &mut metrics,
            &format!("renorm_scale.task_{}", t + 1),
            r.renorm.map_or(1.0, |o| o.scale()),
        );
    }
    kv(&mut metrics, "params.total", census.total);
    kv(&mut metrics, "params.shared", census.shared);
    for (t, p) in census.per_task.iter().enumerate() {
        kv(&mut metrics, &format!("params.task_{}", t + 1), p);
    }
    kv(&mut metrics, "params.complete_isolation_total", complete.total);
    art.write(METRICS_FILE, metrics)?;

    let mut csv = String::from("scope,parameters\n");
    let _ = writeln!(csv, "shared,{}", census.shared);
    for (t, p) in census.per_task.iter().enumerate() {
        let _ = writeln!(csv, "task_{},{p}", t + 1);
    }
    let _ = writeln!(csv, "total,{}", census.total);
    let _ = writeln!(csv, "complete_isolation_total,{}", complete.total);
    art.write(CENSUS_FILE, csv)?;

    let mut losses = String::from("task,epoch,loss,train_accuracy\n");
    for (t, r) in run.reports.iter().enumerate() {
        for (e, (l, a)) in r.losses.iter().zip(&r.train_accuracy).enumerate() {
            let _ = writeln!(losses, "{},{},{l},{a}", t + 1, e + 1);
        }
    }
    art.write(LOSS_FILE, losses)?;
    art.write(PROBABILITY_FILE, probability_csv(&probs))?;

    let mut norms = String::from("task,before,after\n");
    for (t, (b, a)) in run.head_norms_before.iter().zip(&run.head_norms_after).enumerate() {
        let _ = writeln!(norms, "{},{b},{a}", t + 1);
    }
    art.write(HEAD_NORM_FILE, norms)?;
    if stream.len() >= 2 {
        art.write(STABILITY_FILE, stability_csv(&run.class_il, &run.task_il)?)?;
    }
    if cfg.checkpoint {
        let path = art.path(CHECKPOINT_FILE);
        save_model(&run.model, &path)?;
        art.files.push(CHECKPOINT_FILE.to_string());
    }

    let mut log = String::from("command: train\n");
    log.push_str(&assumptions(&arch));
    for (t, r) in run.reports.iter().enumerate() {
        let renorm = match r.renorm {
            Some(RenormOutcome::Applied { eta, scale, .. }) => format!("applied (eta {eta}, scale {scale})"),
            Some(RenormOutcome::Skipped { .. }) => "skipped (no positive activation under the fence)".into(),
            None => "disabled".into(),
        };
        let _ = writeln!(
            log,
            "task {}: {} epochs in {:.2?}, final loss {}, head re-normalization {renorm}",
            t + 1,
            r.losses.len(),
            r.duration,
            r.losses.last().copied().unwrap_or(f32::NAN),
        );
    }
    let _ = writeln!(
        log,
        "isolation check: {} frozen tasks byte-identical",
        run.frozen_snapshots.len()
    );
    let _ = writeln!(log, "total time {:.2?}", start.elapsed());
    art.write(LOG_FILE, log)?;
    Ok(art)
}

/// Train a reference baseline and write its matrices and metrics.
pub fn cmd_baseline(kind: BaselineKind, cfg: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    let start = Instant::now();
    let (stream, arch) = prepare(cfg)?;
    let run = run_baseline(kind, &arch, &stream, &cfg.train_config(), cfg.buffer_size)?;
    let mut art = RunArtifacts::create(out)?;
    art.write(CONFIG_FILE, format!("# baseline kind = {kind}\n{}", cfg.echo()))?;
    art.write(CLASS_IL_FILE, run.class_il.to_csv())?;
    art.write(TASK_IL_FILE, run.task_il.to_csv())?;
    let probs = task_probabilities(&run.last.predicted_tasks, stream.len())?;
    let mut metrics = String::new();
    matrix_metrics(&mut metrics, &run.class_il, &run.task_il)?;
    for (t, p) in probs.iter().enumerate() {
        kv(&mut metrics, &format!("task_probability.task_{}", t + 1), p);
    }
    art.write(METRICS_FILE, metrics)?;
    let mut losses = String::from("stage,epoch,loss\n");
    for (s, trace) in run.losses.iter().enumerate() {
        for (e, l) in trace.iter().enumerate() {
            let _ = writeln!(losses, "{},{},{l}", s + 1, e + 1);
        }
    }
    art.write(LOSS_FILE, losses)?;
    art.write(PROBABILITY_FILE, probability_csv(&probs))?;
    let mut log = format!("command: baseline --kind {kind}\n");
    log.push_str(&assumptions(&arch));
    let _ = writeln!(log, "total time {:.2?}", start.elapsed());
    art.write(LOG_FILE, log)?;
    Ok(art)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AblationGrid {
    /// Every width factor crossed with every depth.
    WidthDepth {
        widths: Vec<f64>,
        depths: Vec<usize>,
    },
    Alpha(Vec<f32>),
}

impl AblationGrid {
    fn points(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        match self {
            AblationGrid::WidthDepth { widths, depths } => widths
                .iter()
                .flat_map(|w| {
                    depths.iter().map(move |d| ExperimentConfig {
                        width_factor: *w,
                        depth: *d,
                        filters_per_task: None,
                        ..base.clone()
                    })
                })
                .collect(),
            AblationGrid::Alpha(alphas) => alphas
                .iter()
                .map(|a| ExperimentConfig {
                    alpha: *a,
                    ..base.clone()
                })
                .collect(),
        }
    }
}

/// One ablation grid point's results.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub width_factor: f64,
    pub depth: usize,
    pub alpha: f32,
    pub params_total: usize,
    pub class_il_final: f64,
    pub task_il_final: f64,
    /// Class-IL stability after each stage `2..=T`.
    pub class_il_stability: Vec<f64>,
    pub task_il_stability: Vec<f64>,
}

/// Worker threads for grid points: `SPARC_THREADS` when set, else all cores.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("SPARC_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "SPARC_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(0),
    }
}

/// Run every grid point (in parallel, each fully independent and seeded
/// from the config seed) and write one CSV row per point in grid order.
pub fn cmd_ablate(cfg: &ExperimentConfig, grid: &AblationGrid, out: &Path) -> Result<(RunArtifacts, Vec<AblationRow>)> {
    let start = Instant::now();
    let points = grid.points(cfg);
    if points.is_empty() {
        return Err(CliError::Usage("empty ablation grid".into()));
    }
    for p in &points {
        p.validate()?;
    }
    let (train, test) = load_data(&cfg.source, cfg.seed)?;
    let stream = split_dataset(&train, &test, cfg.num_tasks, cfg.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap()?)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let rows: Vec<AblationRow> = pool.install(|| {
        points
            .par_iter()
            .map(|p| -> Result<AblationRow> {
                let arch = p.arch(train.channels)?;
                let run = run_sparc(&arch, p.alpha, &stream, &p.train_config())?;
                Ok(AblationRow {
                    width_factor: p.width_factor,
                    depth: p.depth,
                    alpha: p.alpha,
                    params_total: run.model.count_parameters().total,
                    class_il_final: MatrixSummary::compute(&run.class_il)?.final_accuracy,
                    task_il_final: MatrixSummary::compute(&run.task_il)?.final_accuracy,
                    class_il_stability: stability_trace(&run.class_il)?,
                    task_il_stability: stability_trace(&run.task_il)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut csv = String::from(
        "width_factor,depth,alpha,params_total,class_il_final,task_il_final,class_il_stability,task_il_stability",
    );
    for t in 2..=stream.len() {
        let _ = write!(csv, ",class_il_stability_after_task_{t}");
    }
    csv.push('\n');
    for r in &rows {
        let last = |v: &[f64]| v.last().map_or("na".to_string(), ToString::to_string);
        let _ = write!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.width_factor,
            r.depth,
            r.alpha,
            r.params_total,
            r.class_il_final,
            r.task_il_final,
            last(&r.class_il_stability),
            last(&r.task_il_stability)
        );
        for s in &r.class_il_stability {
            let _ = write!(csv, ",{s}");
        }
        csv.push('\n');
    }
    let mut art = RunArtifacts::create(out)?;
    let grid_line = match grid {
        AblationGrid::WidthDepth { widths, depths } => format!("# ablate widths = {widths:?}, depths = {depths:?}\n"),
        AblationGrid::Alpha(a) => format!("# ablate alphas = {a:?}\n"),
    };
    art.write(CONFIG_FILE, format!("{grid_line}{}", cfg.echo()))?;
    art.write(ABLATION_FILE, csv)?;
    let log = format!(
        "command: ablate\n{}grid points: {}\ntotal time {:.2?}\n",
        assumptions(&cfg.arch(train.channels)?),
        rows.len(),
        start.elapsed()
    );
    art.write(LOG_FILE, log)?;
    Ok((art, rows))
}

/// Metrics recomputed from a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub class_il: MatrixSummary,
    pub task_il: MatrixSummary,
    pub probabilities: Option<Vec<f64>>,
    /// `(before, after)` per task.
    pub head_norms: Option<Vec<(f64, f64)>>,
    /// Human-readable table.
    pub text: String,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Format {
            path: path.to_path_buf(),
            message: "missing run artifact".into(),
        },
        _ => CliError::io(path, e),
    })
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    if path.exists() {
        read_text(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Parse a CSV of a header plus numeric columns after the first.
fn numeric_rows(path: &Path, text: &str, header: &str) -> Result<Vec<Vec<f64>>> {
    let bad = |m: String| CliError::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next() != Some(header) {
        return Err(bad(format!("expected header {header:?}")));
    }
    lines
        .map(|l| {
            l.split(',')
                .skip(1)
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|e| bad(format!("bad cell in {l:?}: {e}")))
                })
                .collect()
        })
        .collect()
}

fn read_matrix(path: &Path) -> Result<AccuracyMatrix> {
    AccuracyMatrix::from_csv(&read_text(path)?).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.2}"))
}

/// Summarize a run directory without modifying it; optionally write plot
/// data CSVs into `plots` (which must be a different directory).
pub fn cmd_report(dir: &Path, plots: Option<&Path>) -> Result<Report> {
    let class_m = read_matrix(&dir.join(CLASS_IL_FILE))?;
    let task_m = read_matrix(&dir.join(TASK_IL_FILE))?;
    let class_il = MatrixSummary::compute(&class_m)?;
    let task_il = MatrixSummary::compute(&task_m)?;
    let prob_path = dir.join(PROBABILITY_FILE);
    let probabilities = read_optional(&prob_path)?
        .map(|t| numeric_rows(&prob_path, &t, "task,probability"))
        .transpose()?
        .map(|rows| rows.iter().map(|r| r[0]).collect::<Vec<_>>());
    let norm_path = dir.join(HEAD_NORM_FILE);
    let head_norms = read_optional(&norm_path)?
        .map(|t| numeric_rows(&norm_path, &t, "task,before,after"))
        .transpose()?
        .map(|rows| rows.iter().map(|r| (r[0], r[1])).collect::<Vec<_>>());

    let mut text = format!(
        "run: {}\n\n{:<34}{:>10}{:>10}\n",
        dir.display(),
        "metric",
        "class_il",
        "task_il"
    );
    let rows: [(&str, Option<f64>, Option<f64>); 6] = [
        (
            "final accuracy (A_T)",
            Some(class_il.final_accuracy),
            Some(task_il.final_accuracy),
        ),
        (
            "average incremental accuracy",
            class_il.average_incremental,
            task_il.average_incremental,
        ),
        ("forgetting", class_il.forgetting, task_il.forgetting),
        ("stability", class_il.stability, task_il.stability),
        ("plasticity", class_il.plasticity, task_il.plasticity),
        ("tradeoff", class_il.tradeoff, task_il.tradeoff),
    ];
    for (name, c, t) in rows {
        let _ = writeln!(text, "{name:<34}{:>10}{:>10}", fmt_opt(c), fmt_opt(t));
    }
    if let Some(p) = &probabilities {
        text.push_str("\ntask prediction probabilities\n");
        for (t, v) in p.iter().enumerate() {
            let _ = writeln!(text, "  task {:<4}{v:.4}", t + 1);
        }
    }
    if let Some(n) = &head_norms {
        text.push_str("\nhead L2 norms (before -> after re-normalization)\n");
        for (t, (b, a)) in n.iter().enumerate() {
            let _ = writeln!(text, "  task {:<4}{b:.4} -> {a:.4}", t + 1);
        }
    }

    if let Some(out) = plots {
        let same = match (dir.canonicalize(), out.canonicalize()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        if same {
            return Err(CliError::Usage("plot output must not be the run directory".into()));
        }
        let mut art = RunArtifacts::create(out)?;
        let mut acc = String::from("stage,task,class_il,task_il\n");
        for stage in class_m.first_stage()..class_m.num_tasks() {
            for task in 0..=stage {
                let (c, t) = (class_m.get(stage, task), task_m.get(stage, task));
                if let (Some(c), Some(t)) = (c, t) {
                    let _ = writeln!(acc, "{},{},{c},{t}", stage + 1, task + 1);
                }
            }
        }
        art.write("accuracy_over_time.csv", acc)?;
        if let Some(p) = &probabilities {
            art.write(PROBABILITY_FILE, probability_csv(p))?;
        }
        if let Some(n) = &head_norms {
            let mut s = String::from("task,before,after\n");
            for (t, (b, a)) in n.iter().enumerate() {
                let _ = writeln!(s, "{},{b},{a}", t + 1);
            }
            art.write(HEAD_NORM_FILE, s)?;
        }
    }
    Ok(Report {
        class_il,
        task_il,
        probabilities,
        head_norms,
        text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir_tag: &str) -> (ExperimentConfig, tempfile::TempDir) {
        let cfg = ExperimentConfig::parse_str(&format!(
            "# {dir_tag}\nsynthetic = classes=4,n=20,size=8\nnum_tasks = 2\nwidth_factor = 0.125\ndepth = 1\nepochs = 2\nlearning_rate = 0.05\nbatch_size = 8\n"
        ))
        .unwrap();
        (cfg, tempfile::tempdir().unwrap())
    }

    fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    }

    #[test]
    fn generate_is_deterministic_and_readable() {
        let spec: SyntheticSpec = "classes=3,n=10,size=6".parse().unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let a = cmd_generate(&spec, 4, &tmp.path().join("a")).unwrap();
        let b = cmd_generate(&spec, 4, &tmp.path().join("b")).unwrap();
        assert_eq!(a.files, vec![TRAIN_FILE, TEST_FILE]);
        assert_eq!(snapshot(&a.dir), snapshot(&b.dir));
        let (train, test) = load_data(&DataSource::Dir(a.dir.clone()), 0).unwrap();
        assert_eq!((train.len(), test.len()), (24, 6));
        assert_eq!(
            (train.channels, train.height, train.width, train.num_classes),
            (1, 6, 6, 3)
        );
        let c = cmd_generate(&spec, 5, &tmp.path().join("c")).unwrap();
        assert_ne!(snapshot(&a.dir), snapshot(&c.dir));
    }

    #[test]
    fn missing_dataset_files_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_data(&DataSource::Dir(tmp.path().to_path_buf()), 0),
            Err(CliError::Io { .. })
        ));
        std::fs::write(tmp.path().join(TRAIN_FILE), b"SPDSjunk").unwrap();
        std::fs::write(tmp.path().join(TEST_FILE), b"SPDSjunk").unwrap();
        assert!(matches!(
            load_data(&DataSource::Dir(tmp.path().to_path_buf()), 0),
            Err(CliError::Format { .. })
        ));
    }

    #[test]
    fn train_writes_every_artifact_reproducibly() {
        let (mut cfg, tmp) = tiny("train");
        cfg.checkpoint = true;
        let a = cmd_train(&cfg, &tmp.path().join("a")).unwrap();
        for f in [
            CONFIG_FILE,
            CLASS_IL_FILE,
            TASK_IL_FILE,
            METRICS_FILE,
            CENSUS_FILE,
            LOSS_FILE,
            PROBABILITY_FILE,
            HEAD_NORM_FILE,
            STABILITY_FILE,
            CHECKPOINT_FILE,
            LOG_FILE,
        ] {
            assert!(a.files.iter().any(|x| x == f), "{f} missing");
            assert!(a.path(f).exists());
        }
        // The echo alone reproduces the run.
        let echoed = ExperimentConfig::parse_str(&std::fs::read_to_string(a.path(CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!(echoed, cfg);
        let b = cmd_train(&echoed, &tmp.path().join("b")).unwrap();
        for f in a
            .files
            .iter()
            .filter(|f| f.ends_with(".csv") || *f == METRICS_FILE || *f == CHECKPOINT_FILE)
        {
            assert_eq!(
                std::fs::read(a.path(f)).unwrap(),
                std::fs::read(b.path(f)).unwrap(),
                "{f}"
            );
        }
        let metrics = std::fs::read_to_string(a.path(METRICS_FILE)).unwrap();
        for key in [
            "class_il.final_accuracy",
            "task_il.tradeoff",
            "task_probability.task_2",
            "params.total",
        ] {
            assert!(metrics.contains(key), "{key}");
        }
        let log = std::fs::read_to_string(a.path(LOG_FILE)).unwrap();
        assert!(log.contains("stem:") && log.contains("shortcut: pad"));
    }

    #[test]
    fn full_retention_reports_zero_task_il_forgetting() {
        let (mut cfg, tmp) = tiny("alpha");
        cfg.alpha = 1.0;
        let a = cmd_train(&cfg, tmp.path()).unwrap();
        let metrics = std::fs::read_to_string(a.path(METRICS_FILE)).unwrap();
        assert!(metrics.lines().any(|l| l == "task_il.forgetting = 0"), "{metrics}");
    }

    #[test]
    fn baselines_write_matrices() {
        let (cfg, tmp) = tiny("baseline");
        let joint = cmd_baseline(BaselineKind::Joint, &cfg, &tmp.path().join("joint")).unwrap();
        let m = AccuracyMatrix::from_csv(&std::fs::read_to_string(joint.path(CLASS_IL_FILE)).unwrap()).unwrap();
        assert_eq!(m.rows().len(), 1);
        let sgd = cmd_baseline(BaselineKind::Sgd, &cfg, &tmp.path().join("sgd")).unwrap();
        let m = AccuracyMatrix::from_csv(&std::fs::read_to_string(sgd.path(TASK_IL_FILE)).unwrap()).unwrap();
        assert_eq!(m.rows().len(), 2);
        assert!(std::fs::read_to_string(sgd.path(CONFIG_FILE))
            .unwrap()
            .starts_with("# baseline kind = sgd"));
    }

    #[test]
    fn width_depth_grid_has_one_row_per_point() {
        let (cfg, tmp) = tiny("ablate");
        let grid = AblationGrid::WidthDepth {
            widths: vec![0.0625, 0.125],
            depths: vec![1, 2],
        };
        let (art, rows) = cmd_ablate(&cfg, &grid, tmp.path()).unwrap();
        assert_eq!(rows.len(), 4);
        let csv = std::fs::read_to_string(art.path(ABLATION_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 5);
        // Totals grow with depth at fixed width and with width at fixed depth.
        assert!(rows[0].params_total < rows[1].params_total && rows[2].params_total < rows[3].params_total);
        assert!(rows[0].params_total < rows[2].params_total && rows[1].params_total < rows[3].params_total);
        assert!(cmd_ablate(&cfg, &AblationGrid::Alpha(vec![]), tmp.path()).is_err());
        assert!(cmd_ablate(&cfg, &AblationGrid::Alpha(vec![2.0]), tmp.path()).is_err());
    }

    #[test]
    fn report_is_a_pure_reader_and_recomputes_metrics() {
        let (cfg, tmp) = tiny("report");
        let run = cmd_train(&cfg, &tmp.path().join("run")).unwrap();
        let before = snapshot(&run.dir);
        let plots = tmp.path().join("plots");
        let report = cmd_report(&run.dir, Some(&plots)).unwrap();
        assert_eq!(snapshot(&run.dir), before);
        for field in [
            "final accuracy (A_T)",
            "average incremental accuracy",
            "forgetting",
            "stability",
            "plasticity",
            "tradeoff",
        ] {
            assert!(report.text.contains(field), "{field}");
        }
        let metrics = std::fs::read_to_string(run.path(METRICS_FILE)).unwrap();
        let emitted: f64 = metrics
            .lines()
            .find_map(|l| l.strip_prefix("class_il.tradeoff = "))
            .unwrap()
            .parse()
            .unwrap();
        assert!((report.class_il.tradeoff.unwrap() - emitted).abs() < 1e-6);
        assert_eq!(report.probabilities.as_ref().map(Vec::len), Some(2));
        assert!(plots.join("accuracy_over_time.csv").exists());
        assert!(plots.join(HEAD_NORM_FILE).exists());
        assert!(matches!(cmd_report(&run.dir, Some(&run.dir)), Err(CliError::Usage(_))));
    }

    #[test]
    fn report_of_incomplete_directory_is_a_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_report(tmp.path(), None), Err(CliError::Format { .. })));
        std::fs::write(tmp.path().join(CLASS_IL_FILE), "stage,on_task_1\nafter_task_1,50\n").unwrap();
        std::fs::write(tmp.path().join(TASK_IL_FILE), "garbage\n").unwrap();
        assert!(matches!(cmd_report(tmp.path(), None), Err(CliError::Format { .. })));
    }
}
