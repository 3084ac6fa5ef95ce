//! Command-line front end.
//!
//! Every run writes to `<out>/<run-name>/`: `metrics.csv`, `report.json`,
//! `checkpoint.edkd` and, for `precompute`, `cache.edkc`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::{config_from_value, ExperimentConfig, Mode};
use crate::embed_cache::{build_cache_with, save_cache};
use crate::error::{Error, Result};
use crate::metrics::{
    measure_run, read_report, render_resource_table, static_memory_estimate, write_report, RunReport, REPORT_FILE,
};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::trainer::{evaluate, load_datasets, load_teacher, train, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "checkpoint.edkd";
pub const CACHE_FILE: &str = "cache.edkc";
const CACHE_BATCH: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "edkd", version, about = "Knowledge distillation with teacher embedding caches")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the class-averaged teacher embedding table.
    Precompute(RunArgs),
    /// Train one student.
    Train(RunArgs),
    /// Print validation accuracy of a saved student.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate; defaults to the run's own checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train once per alpha2 value with alpha1 = 1 - alpha2.
    SweepAlpha {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75, 1.0])]
        alphas: Vec<f64>,
    },
    /// Side-by-side resource table from report.json files or run directories.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted KEY=VALUE override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunArgs {
    /// Loads the config; `--mode`/`--seed` act as overrides applied last.
    /// Clip-embed runs without a `cache_path` default to the run directory's
    /// cache file.
    pub fn load(&self) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(&self.config)
            .map_err(|e| Error::Config(format!("{}: {e}", self.config.display())))?;
        let root: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", self.config.display())))?;
        let mut overrides = self.overrides.clone();
        if let Some(m) = self.mode {
            overrides.push(format!("mode=\"{m}\""));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let has_cache = root.get("cache_path").is_some_and(|v| !v.is_null())
            || overrides.iter().any(|o| o.starts_with("cache_path="));
        if !has_cache {
            let name = peek_name(&root, &overrides);
            let path = self.out.join(name).join(CACHE_FILE);
            overrides.push(format!("cache_path={}", Value::String(path.display().to_string())));
        }
        config_from_value(root, &overrides)
    }

    pub fn run_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.out.join(&config.name)
    }
}

fn peek_name(root: &Value, overrides: &[String]) -> String {
    overrides
        .iter()
        .rev()
        .find_map(|o| o.strip_prefix("name="))
        .map(|v| serde_json::from_str::<String>(v).unwrap_or_else(|_| v.to_owned()))
        .or_else(|| root.get("name").and_then(Value::as_str).map(str::to_owned))
        .unwrap_or_else(|| "run".into())
}

/// Validates `EDKD_THREADS`. Training is single-threaded, so any positive
/// cap is already honored.
fn check_threads() -> Result<()> {
    match std::env::var("EDKD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::Config(format!("EDKD_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(()),
    }
}

fn run_and_write(config: &ExperimentConfig, dir: &Path, data: &crate::trainer::TrainData) -> Result<RunReport> {
    let estimate = static_memory_estimate(config)?;
    let (outcome, profile) = measure_run(config.mode, estimate, || {
        let o: TrainOutcome = train(config, data)?;
        let secs = o.report.mean_epoch_seconds();
        Ok((o, secs))
    })?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_report(&outcome.report, &profile, dir)?;
    save_checkpoint(&outcome.student, dir.join(CHECKPOINT_FILE))?;
    Ok(RunReport {
        report: outcome.report,
        resource_profile: profile,
    })
}

/// Executes one invocation, writing human-readable results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    check_threads()?;
    let say = |out: &mut dyn Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cli.command {
        Command::Precompute(args) => {
            let config = args.load()?;
            if config.teacher.is_none() {
                return Err(Error::Validation("precompute requires a teacher".into()));
            }
            let data = load_datasets(&config.dataset)?;
            let teacher = load_teacher(&config)?;
            let digest = config.teacher_digest()?.expect("teacher present");
            let cache = build_cache_with(
                &teacher,
                digest,
                &data.train,
                config.cache_samples_per_class,
                config.seed,
                CACHE_BATCH,
            )?;
            let path = config
                .cache_path
                .clone()
                .unwrap_or_else(|| args.run_dir(&config).join(CACHE_FILE));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_cache(&cache, &path)?;
            say(
                out,
                format!(
                    "wrote {} ({} classes x {} dims, {} bytes)",
                    path.display(),
                    cache.num_classes(),
                    cache.embed_dim(),
                    cache.byte_size()
                ),
            );
        }
        Command::Train(args) => {
            let config = args.load()?;
            let data = load_datasets(&config.dataset)?;
            let dir = args.run_dir(&config);
            let r = run_and_write(&config, &dir, &data)?;
            say(
                out,
                format!(
                    "{} [{}] final accuracy {:.4} -> {}",
                    config.name,
                    config.mode,
                    r.report.final_accuracy,
                    dir.display()
                ),
            );
        }
        Command::Evaluate { run, checkpoint } => {
            let config = run.load()?;
            let path = checkpoint.unwrap_or_else(|| run.run_dir(&config).join(CHECKPOINT_FILE));
            let weights = load_checkpoint(&path)?;
            let data = load_datasets(&config.dataset)?;
            let acc = evaluate(&weights, &data.val)?;
            say(out, format!("accuracy {acc:.4}"));
        }
        Command::SweepAlpha { run, alphas } => {
            let config = run.load()?;
            if config.mode == Mode::SupervisedOnly {
                return Err(Error::Validation("sweep-alpha needs a distillation mode".into()));
            }
            let data = load_datasets(&config.dataset)?;
            if let Some(bad) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(Error::Validation(format!("alpha2 {bad} is outside [0, 1]")));
            }
            say(out, format!("{:<8} {:>9}", "alpha2", "accuracy"));
            for a2 in alphas {
                let mut cfg = config.clone();
                cfg.loss.alpha2 = a2;
                cfg.loss.alpha1 = 1.0 - a2;
                cfg.name = format!("{}-alpha2-{a2}", config.name);
                let dir = run.out.join(&cfg.name);
                let r = run_and_write(&cfg, &dir, &data)?;
                say(out, format!("{a2:<8} {:>9.4}", r.report.final_accuracy));
            }
        }
        Command::Report { reports } => {
            let runs = reports
                .iter()
                .map(|p| {
                    if p.is_dir() {
                        read_report(p.join(REPORT_FILE))
                    } else {
                        read_report(p)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let _ = write!(out, "{}", render_resource_table(&runs));
        }
    }
    Ok(())
}

/// Parses `args`, runs, and maps the outcome to a process exit code. Errors
/// produce exactly one line on `err`.
pub fn main_with(args: impl IntoIterator<Item = String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            // One line: drop the usage block and fold the rest.
            let msg = e.to_string();
            let head = msg
                .split("\n\nUsage:")
                .next()
                .and_then(|m| m.split("\n\nFor more information").next())
                .unwrap_or("invalid arguments");
            let line = head.split_whitespace().collect::<Vec<_>>().join(" ");
            let _ = writeln!(err, "edkd: {}", line.trim_start_matches("error: "));
            return 1;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "edkd: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
