//! Generate the synthetic dataset, train with the synth preset, and evaluate.
//!
//! cargo run --release --example train_synthetic -- [--set key=value ...] [--synth key=value ...]

use std::time::Instant;

use crcl::config::{SynthConfig, TrainConfig};
use crcl::data::{synth_generate, ClipParams, Dataset, Split};
use crcl::eval::evaluate;
use crcl::train::train;

fn main() -> crcl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut overrides: Vec<String> = vec!["dataset=synth".into()];
    let mut synth_overrides = Vec::new();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--set" => overrides.extend(args.next()),
            "--synth" => synth_overrides.extend(args.next()),
            other => eprintln!("ignoring {other}"),
        }
    }
    let cfg = TrainConfig::load(None, &overrides)?;
    let dir = tempfile::tempdir().map_err(|e| crcl::CrclError::io("tempdir", e))?;
    let synth = synth_generate(&SynthConfig::load(None, &synth_overrides)?, 1, dir.path())?;
    let clips = ClipParams { clip_len: cfg.clip_len, stride: cfg.clip_stride };
    let train_ds = Dataset::load(&synth.root, Split::Train, clips, cfg.frame_size)?;
    let test_ds = Dataset::load(&synth.root, Split::Test, clips, cfg.frame_size)?;

    let t0 = Instant::now();
    let trainer = train(&cfg, &train_ds)?;
    println!("trained {} epochs in {:.1}s", trainer.epoch, t0.elapsed().as_secs_f64());
    let (report, _, _) = evaluate(&trainer.model, &test_ds)?;
    println!("AUC {:.4}  EER {:.4}  F-norm gap {:.4} (normal {:.4}, abnormal {:.4})",
        report.auc, report.eer, report.fnorm.gap, report.fnorm.normal_mean, report.fnorm.abnormal_mean);
    for (id, auc) in &report.per_video_auc {
        println!("  video {id}: {auc:?}");
    }
    Ok(())
}
