//! Score a test split with a trained checkpoint and export the evaluation
//! artifacts. Without a checkpoint a short run is trained first.
//!
//! cargo run --release --example score_and_eval -- [--ckpt PATH] [--out DIR]

use std::path::PathBuf;

use crcl::checkpoint::{load_checkpoint, save_checkpoint};
use crcl::config::{SynthConfig, TrainConfig};
use crcl::data::{synth_generate, ClipParams, Dataset, Split};
use crcl::eval::{evaluate, export_curves, fmt_sig};
use crcl::train::Trainer;

fn main() -> crcl::Result<()> {
    let mut ckpt = None;
    let mut out = std::env::temp_dir().join("crcl_eval");
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--ckpt" => ckpt = args.next().map(PathBuf::from),
            "--out" => out = args.next().map(PathBuf::from).unwrap_or(out),
            other => eprintln!("ignoring {other}"),
        }
    }

    let data_dir = out.join("data");
    let synth = synth_generate(&SynthConfig::default(), 1, &data_dir)?;
    let trainer = match ckpt {
        Some(path) => load_checkpoint(&path)?,
        None => {
            let sets = ["dataset=synth", "phase1_epochs=1", "phase2_epochs=1"].map(String::from);
            let cfg = TrainConfig::load(None, &sets)?;
            let clips = ClipParams { clip_len: cfg.clip_len, stride: cfg.clip_stride };
            let train_ds = Dataset::load(&synth.root, Split::Train, clips, cfg.frame_size)?;
            let mut t = Trainer::new(&cfg, train_ds.manifest.num_scenes)?;
            t.run(&train_ds)?;
            save_checkpoint(&t, &out.join("final.ckpt"))?;
            t
        }
    };

    let cfg = &trainer.model.cfg;
    let clips = ClipParams { clip_len: cfg.clip_len, stride: cfg.clip_stride };
    let test_ds = Dataset::load(&synth.root, Split::Test, clips, cfg.frame_size)?;
    let (report, series, windows) = evaluate(&trainer.model, &test_ds)?;

    let scores: Vec<f64> = series.iter().flat_map(|s| s.normalized.iter().copied()).collect();
    let labels: Vec<u8> = test_ds.manifest.videos.iter().flat_map(|v| v.labels.clone().unwrap_or_default()).collect();
    let worst = windows
        .iter()
        .max_by(|a, b| a.score.fnorm.total_cmp(&b.score.fnorm))
        .expect("at least one window");
    export_curves(&out.join("eval"), &scores, &labels, &series, &[("max_fnorm", worst)])?;

    println!("auc {}  eer {}", fmt_sig(report.auc), fmt_sig(report.eer));
    println!(
        "F-norm normal {} abnormal {} gap {}",
        fmt_sig(report.fnorm.normal_mean),
        fmt_sig(report.fnorm.abnormal_mean),
        fmt_sig(report.fnorm.gap)
    );
    println!("artifacts in {}", out.join("eval").display());
    Ok(())
}
