//! Command-line surface: subcommands, common flags and per-key overrides.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sparc_core::engine::BaselineKind;

use crate::commands::{cmd_ablate, cmd_baseline, cmd_generate, cmd_report, cmd_train, AblationGrid};
use crate::config::{ExperimentConfig, SyntheticSpec};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "sparc", version, about = "Rehearsal-free continual learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic blob dataset as train.spds / test.spds.
    Generate {
        /// Dataset shape, e.g. `classes=10,n=250,size=16`.
        #[arg(long, default_value = "classes=10,n=250,size=16")]
        synthetic: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train SPARC over the task stream.
    Train(RunArgs),
    /// Train a reference baseline.
    Baseline {
        #[arg(long, value_parser = parse_kind)]
        kind: BaselineKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sweep width × depth or α.
    Ablate {
        /// Comma-separated width factors (with --depths).
        #[arg(long, value_delimiter = ',', requires = "depths", conflicts_with = "alphas")]
        widths: Option<Vec<f64>>,
        /// Comma-separated depths (with --widths).
        #[arg(long, value_delimiter = ',', requires = "widths")]
        depths: Option<Vec<usize>>,
        /// Comma-separated α values.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f32>>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Summarize a run directory; optionally write plot-data CSVs elsewhere.
    Report {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<BaselineKind, String> {
    s.parse().map_err(|e: sparc_core::SparcError| e.to_string())
}

/// Flags shared by every experiment command. Each override is applied as
/// the matching config key, after the config file.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding train.spds and test.spds.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<String>,
    /// Generate data instead, e.g. `classes=10,n=250,size=16`.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "sparc-run")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub width_factor: Option<String>,
    #[arg(long)]
    pub depth: Option<String>,
    #[arg(long)]
    pub filters_per_task: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub kappa: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub num_tasks: Option<String>,
    #[arg(long)]
    pub buffer_size: Option<String>,
    /// `pad` or `projection`.
    #[arg(long)]
    pub shortcut: Option<String>,
    /// `split` or `complete`.
    #[arg(long)]
    pub isolation: Option<String>,
    #[arg(long)]
    pub renormalize: Option<String>,
    /// Also write the trained model (`true`/`false`).
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Any other `key=value` override; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    /// Overrides in application order: named flags, then `--set`.
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let named = [
            ("data", &self.data),
            ("synthetic", &self.synthetic),
            ("seed", &self.seed),
            ("width_factor", &self.width_factor),
            ("depth", &self.depth),
            ("filters_per_task", &self.filters_per_task),
            ("alpha", &self.alpha),
            ("kappa", &self.kappa),
            ("learning_rate", &self.learning_rate),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("num_tasks", &self.num_tasks),
            ("buffer_size", &self.buffer_size),
            ("shortcut", &self.shortcut),
            ("isolation", &self.isolation),
            ("renormalize", &self.renormalize),
            ("checkpoint", &self.checkpoint),
        ];
        let mut out: Vec<(String, String)> = named
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides()?)
    }
}

/// Execute a parsed command line; returns the text to print.
pub fn run(cli: Cli) -> Result<String> {
    let listing = |dir: &Path, files: &[String]| {
        let mut s = format!("wrote {}:\n", dir.display());
        for f in files {
            s.push_str(&format!("  {f}\n"));
        }
        s
    };
    match cli.command {
        Command::Generate { synthetic, seed, out } => {
            let spec: SyntheticSpec = synthetic.parse()?;
            let art = cmd_generate(&spec, seed, &out)?;
            Ok(listing(&art.dir, &art.files))
        }
        Command::Train(args) => {
            let art = cmd_train(&args.config()?, &args.out)?;
            Ok(listing(&art.dir, &art.files))
        }
        Command::Baseline { kind, run } => {
            let art = cmd_baseline(kind, &run.config()?, &run.out)?;
            Ok(listing(&art.dir, &art.files))
        }
        Command::Ablate {
            widths,
            depths,
            alphas,
            run,
        } => {
            let grid = match (widths, depths, alphas) {
                (Some(widths), Some(depths), None) => AblationGrid::WidthDepth { widths, depths },
                (None, None, Some(alphas)) => AblationGrid::Alpha(alphas),
                _ => {
                    return Err(CliError::Usage(
                        "ablate needs --widths with --depths, or --alphas".into(),
                    ))
                }
            };
            let (art, _) = cmd_ablate(&run.config()?, &grid, &run.out)?;
            Ok(listing(&art.dir, &art.files))
        }
        Command::Report { dir, out } => Ok(cmd_report(&dir, out.as_deref())?.text),
    }
}
