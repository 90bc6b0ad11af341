use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use correction_dst::config::{env_overrides, load_config, parse_override_value, RunConfig};
use correction_dst::report::{format_report, ReportFormat};
use correction_dst::run::{run_experiment, stages, Session};
use correction_dst::{Error, ErrorClass, Result};

/// Two-pass in-context dialogue state tracking: first-pass inference,
/// retrieval-based correction, training-data export and evaluation.
#[derive(Parser)]
#[command(name = "correction-dst", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the low-resource training pool.
    Split(Common),
    /// Embed the training pool and write the retrieval index.
    Index(Common),
    /// Run the inference backend over the training pool to collect hypotheses.
    Collect(Common),
    /// Write correction-tuning sequences (needs `collect`).
    ExportTrain(Common),
    /// Write retriever training pairs.
    ExportRetrieverPairs(Common),
    /// First-pass predictions on the evaluation split.
    FirstPass(Common),
    /// Correction pass over the first-pass predictions.
    SecondPass(Common),
    /// Score a predictions file and write report.json / report.txt.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Predictions file; defaults to the second-pass output, else the first-pass output.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Print the stored report.
    Report(Common),
    /// Run every stage end to end.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long, env = "CDST_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    synonyms: Option<PathBuf>,
    /// Prompt family: mwoz or sgd.
    #[arg(long)]
    style: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    max_concurrency: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// lenient or strict.
    #[arg(long)]
    parse_mode: Option<String>,
    #[arg(long)]
    instruction: Option<String>,
    /// Serve both language-model backends from this recording.
    #[arg(long, conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Record both language-model backends into this file.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Override any config key, e.g. `--set backends.inference.p=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output format for reports: json or table.
    #[arg(long, default_value = "table")]
    format: String,
}

impl Common {
    fn overrides(&self, cwd: &Path) -> Result<Vec<(String, toml::Value)>> {
        let path = |p: &PathBuf| toml::Value::String(cwd.join(p).display().to_string());
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<toml::Value>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("train", self.train.as_ref().map(path));
        push("eval", self.eval.as_ref().map(path));
        push("schema", self.schema.as_ref().map(path));
        push("synonyms", self.synonyms.as_ref().map(path));
        push("output_dir", self.output_dir.as_ref().map(path));
        push("style", self.style.clone().map(toml::Value::String));
        push("k", self.k.map(|v| toml::Value::Integer(v as i64)));
        push("width", self.width.map(|v| toml::Value::Integer(v as i64)));
        push("fraction", self.fraction.map(toml::Value::Float));
        push("max_concurrency", self.max_concurrency.map(|v| toml::Value::Integer(v as i64)));
        push("parse_mode", self.parse_mode.clone().map(toml::Value::String));
        push("instruction", self.instruction.clone().map(toml::Value::String));
        for backend in ["inference", "correction"] {
            push(&format!("backends.{backend}.replay"), self.replay.as_ref().map(path));
            push(&format!("backends.{backend}.record"), self.record.as_ref().map(path));
        }
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {item:?}")))?;
            out.push((k.trim().to_string(), parse_override_value(v.trim())));
        }
        Ok(out)
    }

    fn config(&self) -> Result<RunConfig> {
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        let env = env_overrides(std::env::vars().filter(|(k, _)| k != "CDST_CONFIG"));
        load_config(self.config.as_deref(), &env, &self.overrides(&cwd)?, &cwd)
    }

    fn report_format(&self) -> Result<ReportFormat> {
        self.format.parse()
    }
}

fn session(common: &Common, interrupt: &Arc<AtomicBool>) -> Result<Session> {
    Ok(Session::new(common.config()?).with_interrupt(interrupt.clone()))
}

fn execute(cmd: Command, interrupt: &Arc<AtomicBool>) -> Result<()> {
    let say = |msg: String| println!("{msg}");
    match cmd {
        Command::Split(c) => say(stages::split(&session(&c, interrupt)?)?),
        Command::Index(c) => say(stages::index(&session(&c, interrupt)?)?),
        Command::Collect(c) => say(stages::collect(&session(&c, interrupt)?)?),
        Command::ExportTrain(c) => say(stages::export_train(&session(&c, interrupt)?)?),
        Command::ExportRetrieverPairs(c) => say(stages::export_pairs(&session(&c, interrupt)?)?),
        Command::FirstPass(c) => say(stages::first_pass(&session(&c, interrupt)?)?),
        Command::SecondPass(c) => say(stages::second_pass(&session(&c, interrupt)?)?),
        Command::Evaluate { common, predictions } => {
            let fmt = common.report_format()?;
            let report = stages::evaluate(&session(&common, interrupt)?, predictions.as_deref())?;
            print!("{}", format_report(&report, fmt)?);
        }
        Command::Report(c) => {
            let fmt = c.report_format()?;
            print!("{}", format_report(&stages::stored_report(&session(&c, interrupt)?)?, fmt)?);
        }
        Command::Run(c) => {
            let fmt = c.report_format()?;
            let outcome = run_experiment(&session(&c, interrupt)?)?;
            print!("{}", format_report(&outcome.report, fmt)?);
            if outcome.manifest.failed_turns > 0 {
                return Err(Error::Backend(format!(
                    "{} turns flagged with backend errors",
                    outcome.manifest.failed_turns
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let interrupt = Arc::new(AtomicBool::new(false));
    let flag = interrupt.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("no interrupt handler: {e}");
    }
    match execute(cli.command, &interrupt) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Validation => ExitCode::from(1),
                ErrorClass::Runtime => ExitCode::from(2),
            }
        }
    }
}
