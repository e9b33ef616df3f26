//! Generate the synthetic moving-sprite dataset and inspect what was written.
//!
//! cargo run --release --example synth_dataset -- [OUT_DIR] [key=value ...]

use std::path::PathBuf;

use crcl::config::SynthConfig;
use crcl::data::{synth_generate, ClipParams, Dataset, Split};

fn main() -> crcl::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("crcl_synth"));
    let overrides: Vec<String> = args.collect();
    let cfg = SynthConfig::load(None, &overrides)?;
    let ds = synth_generate(&cfg, 7, &out)?;

    println!("root {}", ds.root.display());
    println!("scenes {}", ds.num_scenes());
    println!("video_id split scene frames");
    for row in &ds.meta {
        println!("{:>8} {:>5} {:>5} {:>6}", row.video_id, row.split, row.scene_id, row.num_frames);
    }
    for a in &ds.anomalies {
        println!("video {} anomaly {:?} frames {}..{}", a.video_id, a.kind, a.start, a.start + a.len);
    }

    let clips = ClipParams::default();
    for split in [Split::Train, Split::Test] {
        let loaded = Dataset::load(&ds.root, split, clips, cfg.frame_size)?;
        let all = loaded.all_clips()?;
        let abnormal = all.iter().filter(|c| c.labels.as_ref().is_some_and(|l| l[l.len() - 1] == 1)).count();
        println!(
            "{split}: {} videos, {} clips ({} ending on an abnormal frame), clip tensor {:?}",
            loaded.manifest.videos.len(),
            all.len(),
            abnormal,
            loaded.clip_tensor(&all[0]).shape()
        );
    }
    Ok(())
}
