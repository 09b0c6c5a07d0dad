//! The `magic` command line: synth, train, eval, gradcheck, report.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::load_checkpoint;
use crate::data::{load_samples, read_manifest, save_samples, synthesize, SceneConfig};
use crate::error::{MagicError, Result};
use crate::eval::{
    emit_report, evaluate_subsets, parse_report_csv, plot_data, summary_path, summary_table,
};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::modality::ModalitySet;
use crate::trainer::{log_header, train, CheckpointSink, TrainConfig, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const LOG_FILE: &str = "train_log.csv";
pub const RANKING_FILE: &str = "ranking.csv";

#[derive(Debug, Parser)]
#[command(
    name = "magic",
    version,
    about = "Modality-agnostic multi-modal segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic multi-modal samples and a manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
    },
    /// Train a model; writes a log, rankings and checkpoints into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every modality subset (or the listed ones).
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subsets, e.g. "R+D,R+D+E+L".
        #[arg(long)]
        subsets: Option<String>,
    },
    /// Compare analytic and finite-difference gradients on a toy network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the summary table of an eval report, optionally writing plot data.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Synth {
            config,
            out: dir,
            seed,
            count,
        } => cmd_synth(&config, &dir, seed, count, out),
        Command::Train {
            data,
            config,
            out: dir,
            resume,
        } => cmd_train(&data, &config, &dir, resume.as_deref(), out),
        Command::Eval {
            data,
            ckpt,
            out: path,
            subsets,
        } => cmd_eval(&data, &ckpt, &path, subsets.as_deref(), out),
        Command::Gradcheck { seed } => cmd_gradcheck(seed, out),
        Command::Report { report, plot } => cmd_report(&report, plot.as_deref(), out),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) {
    let _ = writeln!(out, "{}", line.as_ref());
}

pub fn config_hash(config: &SceneConfig) -> String {
    hex::encode(Sha256::digest(config.to_kv_string().as_bytes()))
}

fn cmd_synth(
    config: &Path,
    dir: &Path,
    seed: u64,
    count: usize,
    out: &mut dyn Write,
) -> Result<i32> {
    let cfg = SceneConfig::load(config)?;
    let samples = synthesize(seed, count, &cfg)?;
    let manifest = save_samples(&samples, dir, Some(config_hash(&cfg)))?;
    say(
        out,
        format!(
            "wrote {} samples to {}",
            manifest.entries.len(),
            dir.display()
        ),
    );
    Ok(EXIT_OK)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MagicError::io(path, e))
}

/// Rows of an existing CSV whose leading step is below `step`.
fn rows_before(path: &Path, step: u64) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < step)
        })
        .map(str::to_string)
        .collect()
}

fn cmd_train(
    data: &Path,
    config: &Path,
    dir: &Path,
    resume: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    if read_manifest(data)?.is_none() {
        return Err(MagicError::arg(format!(
            "no manifest in {}",
            data.display()
        )));
    }
    let samples = load_samples(data)?;
    let cfg = TrainConfig::load(config)?;
    let state = match resume {
        Some(p) => Some(TrainState::from_checkpoint(load_checkpoint(p)?)?),
        None => None,
    };
    let start = state.as_ref().map_or(0, |s| s.step);
    fs::create_dir_all(dir).map_err(|e| MagicError::io(dir, e))?;
    let log_path = dir.join(LOG_FILE);
    let rank_path = dir.join(RANKING_FILE);
    let (prior_log, prior_rank) = if start > 0 {
        (
            rows_before(&log_path, start),
            rows_before(&rank_path, start),
        )
    } else {
        (Vec::new(), Vec::new())
    };

    let sink = CheckpointSink { dir };
    let (state, log) = train(&samples, &cfg, state, Some(&sink))?;

    let mut text = log_header(&cfg);
    for r in prior_log {
        text.push_str(&r);
        text.push('\n');
    }
    for r in &log.rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    write_file(&log_path, &text)?;

    let fresh = log.rankings_csv(&cfg);
    let mut lines = fresh.lines();
    let mut text = format!("{}\n", lines.next().unwrap_or_default());
    for r in prior_rank.iter().map(String::as_str).chain(lines) {
        text.push_str(r);
        text.push('\n');
    }
    write_file(&rank_path, &text)?;

    if let Some(last) = log.rows.last() {
        say(
            out,
            format!(
                "step={} l_m={:.6} l_s={:.6} l_c={:.6} total={:.6}",
                last.step, last.loss.l_m, last.loss.l_s, last.loss.l_c, last.loss.total
            ),
        );
    }
    say(out, format!("checkpoint={}", sink.final_path().display()));
    say(out, format!("steps={}", state.step));
    Ok(EXIT_OK)
}

pub fn parse_subset_list(text: &str) -> Result<Vec<ModalitySet>> {
    let list: Vec<ModalitySet> = text
        .split(',')
        .map(|s| ModalitySet::parse(s.trim()))
        .collect::<Result<_>>()?;
    if list.is_empty() {
        return Err(MagicError::arg("empty subset list"));
    }
    Ok(list)
}

fn cmd_eval(
    data: &Path,
    ckpt: &Path,
    path: &Path,
    subsets: Option<&str>,
    out: &mut dyn Write,
) -> Result<i32> {
    let samples = load_samples(data)?;
    let model = load_checkpoint(ckpt)?.model;
    let subsets = subsets.map(parse_subset_list).transpose()?;
    let report = evaluate_subsets(&model, &samples, subsets.as_deref())?;
    emit_report(&report, path)?;
    for r in &report.rows {
        say(out, format!("{} miou={:.8e}", r.subset, r.metrics.miou));
    }
    say(
        out,
        format!(
            "mean miou={:.8e} mf1={:.8e} macc={:.8e}",
            report.mean_miou, report.mean_mf1, report.mean_macc
        ),
    );
    say(
        out,
        format!(
            "report={} summary={}",
            path.display(),
            summary_path(path).display()
        ),
    );
    Ok(EXIT_OK)
}

fn cmd_gradcheck(seed: u64, out: &mut dyn Write) -> Result<i32> {
    let report = run_gradcheck(&GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    })?;
    for l in report.lines() {
        say(out, l);
    }
    Ok(gradcheck_exit(&report))
}

pub fn gradcheck_exit(report: &crate::gradcheck::GradcheckReport) -> i32 {
    if report.passed() {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    }
}

fn cmd_report(report: &Path, plot: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let text = fs::read_to_string(report).map_err(|e| MagicError::io(report, e))?;
    let rows = parse_report_csv(&text)?;
    if rows.is_empty() {
        return Err(MagicError::EmptyReport);
    }
    let _ = write!(out, "{}", summary_table(&rows));
    if let Some(p) = plot {
        write_file(p, &plot_data(&rows))?;
    }
    Ok(EXIT_OK)
}
