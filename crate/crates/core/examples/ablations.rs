//! Train the full model and single-component ablations on one synthetic
//! dataset and compare frame-level AUC.
//!
//! cargo run --release --example ablations -- [--set key=value ...]

use std::time::Instant;

use crcl::config::{SynthConfig, TrainConfig};
use crcl::data::{synth_generate, ClipParams, Dataset, Split};
use crcl::eval::evaluate;
use crcl::train::train;

const VARIANTS: [(&str, &str); 5] = [
    ("full", ""),
    ("no C1", "c1_term=false"),
    ("no C2", "c2_term=false"),
    ("no C3", "c3_term=false"),
    ("no clustering", "clustering=false"),
];

fn main() -> crcl::Result<()> {
    let mut base: Vec<String> = vec!["dataset=synth".into()];
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        if a == "--set" {
            base.extend(args.next());
        }
    }
    let dir = tempfile::tempdir().map_err(|e| crcl::CrclError::io("tempdir", e))?;
    let synth = synth_generate(&SynthConfig::default(), 1, dir.path())?;

    println!("{:<14} {:>7} {:>7} {:>8} {:>7}", "variant", "auc", "eer", "gap", "secs");
    for (name, set) in VARIANTS {
        let mut sets = base.clone();
        if !set.is_empty() {
            sets.push(set.into());
        }
        let cfg = TrainConfig::load(None, &sets)?;
        let clips = ClipParams { clip_len: cfg.clip_len, stride: cfg.clip_stride };
        let train_ds = Dataset::load(&synth.root, Split::Train, clips, cfg.frame_size)?;
        let test_ds = Dataset::load(&synth.root, Split::Test, clips, cfg.frame_size)?;
        let t0 = Instant::now();
        let trainer = train(&cfg, &train_ds)?;
        let (r, _, _) = evaluate(&trainer.model, &test_ds)?;
        println!(
            "{name:<14} {:>7.4} {:>7.4} {:>8.4} {:>7.1}",
            r.auc,
            r.eer,
            r.fnorm.gap,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
