//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration/format/io error, 2 numeric
//! failure, 3 verification failure.

pub mod config;
pub mod gradcheck;
pub mod project;
pub mod svg;
pub mod sweep;
pub mod theorem;
pub mod train;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::synthdata::{generate, save_dataset, GenConfig};
use config::{read_json, ExperimentConfig, SweepSpec};
use gradcheck::GradCheckSpec;
use theorem::TheoremSpec;

#[derive(Parser, Debug)]
#[command(name = "modality-lab", version, about = "Modality-gap regularizer lab on synthetic paired data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset from a generator config.
    Generate(Common),
    /// Train a two-tower model and evaluate it on the held-out split.
    Train(Common),
    /// Re-evaluate a saved checkpoint.
    Evaluate(Common),
    /// Sweep the alignment weight and record gap against downstream metrics.
    SweepGap {
        #[command(flatten)]
        common: Common,
        /// Worker threads for independent sweep cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Exhaustively check the alignment bound over encoder pairs.
    VerifyTheorem(Common),
    /// Finite-difference gradient checks for every loss.
    Gradcheck(OptionalConfig),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct OptionalConfig {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn run() -> i32 {
    run_with(std::env::args_os())
}

pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Generate(c) => cmd_generate(&c),
        Command::Train(c) => cmd_train(&c),
        Command::Evaluate(c) => cmd_evaluate(&c),
        Command::SweepGap { common, jobs } => cmd_sweep(&common, jobs),
        Command::VerifyTheorem(c) => cmd_verify_theorem(&c),
        Command::Gradcheck(c) => cmd_gradcheck(&c),
    }
}

fn out_dir(flag: &Option<PathBuf>, from_config: Option<&PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| from_config.cloned())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn config_dir(path: &Path) -> Option<&Path> {
    path.parent().filter(|p| !p.as_os_str().is_empty())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_experiment(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_json(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_generate(c: &Common) -> Result<i32> {
    let mut cfg: GenConfig = read_json(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let data = generate(&cfg)?;
    let path = out_dir(&c.out, None)?.join("dataset.mmds");
    save_dataset(&data, &path)?;
    println!("wrote {} ({} rows)", path.display(), data.len());
    Ok(0)
}

fn cmd_train(c: &Common) -> Result<i32> {
    let cfg = load_experiment(c)?;
    let data = cfg.dataset(config_dir(&c.config))?;
    let out = out_dir(&c.out, cfg.out_dir.as_ref())?;
    let outcome = train::train(&cfg, &data)?;
    fs::write(out.join("loss_curve.csv"), train::loss_curve_csv(&outcome.epochs))?;
    save_checkpoint(&outcome.model, out.join("checkpoint.mmtw"))?;
    write_json(&out.join("metrics.json"), &outcome.metrics)?;
    let m = &outcome.metrics;
    println!(
        "paired_gap {:.4}  r@1 i2t {:.4}  zero-shot {:.4}  probe {:.4}",
        m.paired_gap, m.r_at_1_i2t, m.zero_shot_accuracy, m.linear_probe_accuracy
    );
    Ok(0)
}

fn cmd_evaluate(c: &Common) -> Result<i32> {
    let cfg = load_experiment(c)?;
    let data = cfg.dataset(config_dir(&c.config))?;
    let out = out_dir(&c.out, cfg.out_dir.as_ref())?;
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.mmtw"));
    let model = load_checkpoint(&ckpt)?;
    if model.config.text_input_dim != data.text.cols() || model.config.image_input_dim != data.image.cols() {
        return Err(Error::config(format!(
            "checkpoint expects input widths ({}, {}) but the dataset has ({}, {})",
            model.config.text_input_dim,
            model.config.image_input_dim,
            data.text.cols(),
            data.image.cols()
        )));
    }
    let splits = train::split_indices(data.len(), &cfg.splits, cfg.seed);
    let eval = train::evaluate(&model, &data, &splits, &cfg.probe)?;
    write_json(&out.join("metrics.json"), &eval.metrics)?;
    println!("wrote {}", out.join("metrics.json").display());
    Ok(0)
}

fn cmd_sweep(c: &Common, jobs: usize) -> Result<i32> {
    let mut spec: SweepSpec = read_json(&c.config)?;
    if let Some(s) = c.seed {
        spec.seeds = vec![s];
    }
    spec.validate()?;
    let data = spec.base.dataset(config_dir(&c.config))?;
    let out = out_dir(&c.out, spec.base.out_dir.as_ref())?;
    let outcome = sweep::run_sweep(&spec, &data, jobs)?;
    fs::write(out.join("sweep.csv"), outcome.csv())?;
    for (name, svg) in &outcome.figures {
        fs::write(out.join(name), svg)?;
    }
    for &l in &spec.lambda_align {
        println!(
            "lambda_align {l}: mean paired_gap {:.4}, mean r@1 i2t {:.4}",
            outcome.mean_at(l, |r| r.paired_gap).unwrap_or(f64::NAN),
            outcome.mean_at(l, |r| r.r_at_1_i2t).unwrap_or(f64::NAN)
        );
    }
    Ok(0)
}

fn cmd_verify_theorem(c: &Common) -> Result<i32> {
    let mut spec: TheoremSpec = read_json(&c.config)?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let batch = theorem::run_theorem(&spec)?;
    if let Some(dir) = &c.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("theorem_report.json"), &batch)?;
    }
    println!(
        "{} distributions, {} encoder pairs, {} covered by the bound, {} violations, min slack {}",
        batch.results.len(),
        batch.pairs,
        batch.checked,
        batch.violations,
        batch.min_slack.map_or("n/a".to_string(), |s| format!("{s:.3e}"))
    );
    if !batch.passed() {
        return Err(Error::Verification(format!("{} encoder pairs violate the bound", batch.violations)));
    }
    Ok(0)
}

fn cmd_gradcheck(c: &OptionalConfig) -> Result<i32> {
    let mut spec = match &c.config {
        Some(p) => read_json::<GradCheckSpec>(p)?,
        None => GradCheckSpec::default(),
    };
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let summary = gradcheck::run_gradcheck(&spec)?;
    if let Some(dir) = &c.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &summary)?;
    }
    for e in summary.entries.iter().filter(|e| !e.pass) {
        println!(
            "FAIL {} configuration {}: max relative error {:.3e}",
            e.loss, e.configuration, e.max_rel_error
        );
    }
    println!(
        "{} checks, {} failures, worst relative error {:.3e} (tolerance {:.1e})",
        summary.checks, summary.failures, summary.worst_rel_error, summary.tolerance
    );
    if summary.failures > 0 {
        return Err(Error::Numeric(format!("{} gradient checks exceeded tolerance", summary.failures)));
    }
    Ok(0)
}
