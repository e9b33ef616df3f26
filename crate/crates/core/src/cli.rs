//! Command-line front end: `synth | train | score | eval | report`.
//!
//! Exit codes: 0 on success, 1 on a usage error (bad flags, unknown or
//! mistyped config keys, missing inputs), 2 when a command fails at run time.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{SynthConfig, TrainConfig};
use crate::data::{synth_generate, ClipParams, Dataset, Split};
use crate::error::CrclError;
use crate::eval::{evaluate, export_curves, fmt_sig, EvalReport};
use crate::scoring::{score_dataset, write_scores, WindowRecord};
use crate::train::{log_csv, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Keys that may be overridden when scoring a trained checkpoint; everything
/// else is fixed by training.
pub const SCORING_KEYS: &[&str] = &["data_root", "clip_stride", "score_window"];

#[derive(Parser, Debug)]
#[command(name = "crcl", version, about = "Causal representation consistency learning for video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic multi-scene dataset to --out.
    Synth(RunArgs),
    /// Train on the train split of --data (or data_root); --ckpt resumes.
    Train(RunArgs),
    /// Write per-frame scores of the test split under --out/scores.
    Score(RunArgs),
    /// Score the test split and write report.csv, roc.csv, and scores.
    Eval(RunArgs),
    /// Write per-window F-norms and C1 matrices of selected windows.
    Report(RunArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// flat `key = value` config file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// checkpoint to evaluate or resume from
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// dataset root (meta.csv, train/, test/)
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// master seed
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// config override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Usage(String),
    Runtime(CrclError),
}

impl From<CrclError> for Failure {
    fn from(e: CrclError) -> Self {
        match e {
            CrclError::UnknownKey(_) | CrclError::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

type Res<T> = std::result::Result<T, Failure>;
type Outcome = Res<()>;

fn usage<T>(msg: impl Into<String>) -> Res<T> {
    Err(Failure::Usage(msg.into()))
}

fn command() -> clap::Command {
    let mut help = String::from("Training config keys (defaults before any dataset preset):\n");
    help.push_str(&TrainConfig::help_text());
    help.push_str("\nSynthetic dataset keys (synth command):\n");
    help.push_str(&SynthConfig::help_text());
    Cli::command().after_help(help)
}

/// Parse `argv` (including the program name), run the command, and return the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command().try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn reject(flag: &str, present: bool, cmd: &str) -> Outcome {
    if present {
        return usage(format!("`{cmd}` does not take {flag}"));
    }
    Ok(())
}

fn existing_config(a: &RunArgs) -> Res<Option<&Path>> {
    match &a.config {
        Some(p) if !p.is_file() => usage(format!("config file {} not found", p.display())),
        p => Ok(p.as_deref()),
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CrclError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::Runtime(CrclError::io(path, e)))
}

fn synth(a: &RunArgs) -> Outcome {
    reject("--ckpt", a.ckpt.is_some(), "synth")?;
    reject("--data", a.data.is_some(), "synth")?;
    let cfg = SynthConfig::load(existing_config(a)?, &a.set)?;
    let seed = a.seed.unwrap_or(0);
    let ds = synth_generate(&cfg, seed, &a.out)?;
    write_text(&a.out.join("synth.cfg"), &format!("# seed {seed}\n{}", cfg.to_text()))?;
    log::info!("wrote {} videos under {}", ds.meta.len(), a.out.display());
    Ok(())
}

fn data_root(a: &RunArgs, cfg: &TrainConfig) -> Res<PathBuf> {
    match (&a.data, cfg.data_root.is_empty()) {
        (Some(d), _) => Ok(d.clone()),
        (None, false) => Ok(PathBuf::from(&cfg.data_root)),
        (None, true) => usage("no dataset: pass --data or set data_root"),
    }
}

fn load_split(root: &Path, split: Split, cfg: &TrainConfig) -> Res<Dataset> {
    let clips = ClipParams { clip_len: cfg.clip_len, stride: cfg.clip_stride };
    Ok(Dataset::load(root, split, clips, cfg.frame_size)?)
}

fn train(a: &RunArgs) -> Outcome {
    let mut overrides = a.set.clone();
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    let resumed = match &a.ckpt {
        Some(p) => {
            reject("--config", a.config.is_some(), "train --ckpt")?;
            if !overrides.is_empty() {
                return usage("a resumed run keeps its checkpoint config; drop --set/--seed");
            }
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let cfg = match &resumed {
        Some(t) => t.model.cfg.clone(),
        None => TrainConfig::load(existing_config(a)?, &overrides)?,
    };
    let ds = load_split(&data_root(a, &cfg)?, Split::Train, &cfg)?;
    let mut trainer = match resumed {
        Some(t) if t.model.num_scenes != ds.manifest.num_scenes => {
            return Err(Failure::Runtime(CrclError::Dataset(format!(
                "checkpoint trained on {} scenes, dataset has {}",
                t.model.num_scenes, ds.manifest.num_scenes
            ))));
        }
        Some(t) => t,
        None => {
            if cfg.sdl && ds.manifest.num_scenes < 2 {
                log::warn!("scene debiasing disabled: the training data has a single scene");
            }
            Trainer::new(&cfg, ds.manifest.num_scenes)?
        }
    };
    write_text(&a.out.join("config.cfg"), &cfg.to_text())?;
    trainer.run(&ds)?;
    write_text(&a.out.join("log.csv"), &log_csv(&trainer.log))?;
    save_checkpoint(&trainer, &a.out.join("final.ckpt"))?;
    Ok(())
}

/// Checkpoint plus the labeled test split it is scored on.
fn scoring_inputs(a: &RunArgs, cmd: &str) -> Res<(Trainer, Dataset)> {
    reject("--config", a.config.is_some(), cmd)?;
    reject("--seed", a.seed.is_some(), cmd)?;
    let Some(ckpt) = &a.ckpt else {
        return usage(format!("`{cmd}` needs --ckpt"));
    };
    let mut trainer = load_checkpoint(ckpt)?;
    if !a.set.is_empty() {
        for o in &a.set {
            let key = o.split_once('=').map_or(o.as_str(), |(k, _)| k.trim());
            if !SCORING_KEYS.contains(&key) {
                return usage(format!("`{key}` cannot be changed after training (allowed: {})", SCORING_KEYS.join(", ")));
            }
        }
        let text = trainer.model.cfg.to_text();
        trainer.model.cfg = TrainConfig::parse_str(&text, &a.set)?;
    }
    let cfg = trainer.model.cfg.clone();
    let ds = load_split(&data_root(a, &cfg)?, Split::Test, &cfg)?;
    Ok((trainer, ds))
}

fn score(a: &RunArgs) -> Outcome {
    let (trainer, ds) = scoring_inputs(a, "score")?;
    for (series, _) in score_dataset(&trainer.model, &ds)? {
        write_scores(&a.out, &series)?;
    }
    Ok(())
}

/// `metric,value` rows of an evaluation.
pub fn report_csv(r: &EvalReport) -> String {
    let mut s = String::from("metric,value\n");
    let mut row = |k: &str, v: String| {
        let _ = writeln!(s, "{k},{v}");
    };
    row("auc", fmt_sig(r.auc));
    row("eer", fmt_sig(r.eer));
    row("fnorm_normal_mean", fmt_sig(r.fnorm.normal_mean));
    row("fnorm_abnormal_mean", fmt_sig(r.fnorm.abnormal_mean));
    row("fnorm_gap", fmt_sig(r.fnorm.gap));
    row("normal_windows", r.fnorm.normal_windows.to_string());
    row("abnormal_windows", r.fnorm.abnormal_windows.to_string());
    for (id, auc) in &r.per_video_auc {
        row(&format!("auc_video_{id:03}"), auc.map_or_else(|| "nan".into(), fmt_sig));
    }
    s
}

fn eval(a: &RunArgs) -> Outcome {
    let (trainer, ds) = scoring_inputs(a, "eval")?;
    let (report, series, _) = evaluate(&trainer.model, &ds)?;
    let scores: Vec<f64> = series.iter().flat_map(|s| s.normalized.iter().copied()).collect();
    let labels: Vec<u8> = ds.manifest.videos.iter().flat_map(|v| v.labels.clone().unwrap_or_default()).collect();
    export_curves(&a.out, &scores, &labels, &series, &[])?;
    write_text(&a.out.join("report.csv"), &report_csv(&report))?;
    println!("auc {} eer {} fnorm_gap {}", fmt_sig(report.auc), fmt_sig(report.eer), fmt_sig(report.fnorm.gap));
    Ok(())
}

/// One row per scored window.
pub fn windows_csv(windows: &[WindowRecord]) -> String {
    let mut s = String::from("video_id,frame_index,label,raw,fnorm,distance\n");
    for w in windows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            w.video_id,
            w.frame_index,
            w.label.map_or_else(String::new, |l| l.to_string()),
            fmt_sig(w.score.raw),
            fmt_sig(w.score.fnorm),
            fmt_sig(w.score.distance)
        );
    }
    s
}

/// The lowest-F-norm normal window and the highest-F-norm abnormal window.
pub fn pick_windows(windows: &[WindowRecord]) -> Vec<(&'static str, &WindowRecord)> {
    let by = |lab: u8| windows.iter().filter(move |w| w.label == Some(lab));
    let mut out = Vec::new();
    if let Some(w) = by(0).min_by(|a, b| a.score.fnorm.total_cmp(&b.score.fnorm)) {
        out.push(("normal", w));
    }
    if let Some(w) = by(1).max_by(|a, b| a.score.fnorm.total_cmp(&b.score.fnorm)) {
        out.push(("abnormal", w));
    }
    out
}

fn report(a: &RunArgs) -> Outcome {
    let (trainer, ds) = scoring_inputs(a, "report")?;
    let (report, series, windows) = evaluate(&trainer.model, &ds)?;
    let scores: Vec<f64> = series.iter().flat_map(|s| s.normalized.iter().copied()).collect();
    let labels: Vec<u8> = ds.manifest.videos.iter().flat_map(|v| v.labels.clone().unwrap_or_default()).collect();
    export_curves(&a.out, &scores, &labels, &series, &pick_windows(&windows))?;
    write_text(&a.out.join("windows.csv"), &windows_csv(&windows))?;
    write_text(&a.out.join("report.csv"), &report_csv(&report))?;
    Ok(())
}
