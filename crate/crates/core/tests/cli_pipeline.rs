//! The full command pipeline driven through `cli::run`: synth, train, score,
//! eval, report, and resume of a finished run.

use std::fs;
use std::path::Path;

use crcl::checkpoint::load_checkpoint;
use crcl::cli::{run, EXIT_OK, EXIT_USAGE};

const RUN_CFG: &str = "dataset = synth\nphase1_epochs = 1\nphase2_epochs = 1\n";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_train_score_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let exp = dir.path().join("exp1");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, RUN_CFG).unwrap();

    assert_eq!(run(["crcl", "synth", "--out", s(&data), "--seed", "1"]), EXIT_OK);
    assert!(data.join("meta.csv").is_file());

    let code = run(["crcl", "train", "--config", s(&cfg), "--out", s(&exp), "--data", s(&data), "--set", "lr=1e-4"]);
    assert_eq!(code, EXIT_OK);
    assert!(read(&exp.join("config.cfg")).lines().any(|l| l == "lr = 0.0001"));
    let log = read(&exp.join("log.csv"));
    assert!(log.starts_with("epoch,phase,L_total,L_c,L_compact,L_separate,L_cluster,L_cs,L_cm,L_KL,L_t"));
    assert_eq!(log.lines().count(), 3);
    let ckpt = exp.join("final.ckpt");
    assert_eq!(load_checkpoint(&ckpt).unwrap().model.cfg.lr, 1e-4);

    let scored = dir.path().join("scored");
    assert_eq!(run(["crcl", "score", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&scored)]), EXIT_OK);
    let files: Vec<_> = fs::read_dir(scored.join("scores")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 4, "{files:?}");
    assert!(read(&scored.join("scores/video_000.csv")).starts_with("frame_index,raw,normalized
0,"));

    let eval_args = ["crcl", "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&exp)];
    assert_eq!(run(eval_args), EXIT_OK);
    let first = read(&exp.join("report.csv"));
    assert_eq!(run(eval_args), EXIT_OK);
    assert_eq!(first, read(&exp.join("report.csv")));
    assert!(first.starts_with("metric,value\nauc,"));
    assert!(exp.join("roc.csv").is_file());

    let rep = dir.path().join("report");
    assert_eq!(run(["crcl", "report", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&rep)]), EXIT_OK);
    assert_eq!(read(&rep.join("report.csv")), first);
    assert!(rep.join("c1_matrix_normal.csv").is_file());
    assert!(rep.join("c1_matrix_abnormal.csv").is_file());
    assert!(read(&rep.join("windows.csv")).starts_with("video_id,frame_index,label,raw,fnorm,distance"));

    // Training knobs cannot change after training.
    let bad = ["crcl", "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&exp), "--set", "lr=1"];
    assert_eq!(run(bad), EXIT_USAGE);
}

#[test]
fn train_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, RUN_CFG).unwrap();
    let synth_args = ["--set", "train_videos_per_scene=1", "--set", "test_videos_per_scene=1"];
    let mut args = vec!["crcl", "synth", "--out", s(&data), "--seed", "2"];
    args.extend(synth_args);
    assert_eq!(run(args), EXIT_OK);

    let train_to = |out: &Path, extra: &[&str]| {
        let mut a = vec!["crcl", "train", "--config", s(&cfg), "--data", s(&data), "--out", s(out)];
        a.extend(extra);
        assert_eq!(run(a), EXIT_OK);
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_to(&a, &[]);
    train_to(&b, &[]);
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
    assert_eq!(read(&a.join("log.csv")), read(&b.join("log.csv")));

    // Resuming a finished run is a no-op.
    let resumed = dir.path().join("resumed");
    let code = run(["crcl", "train", "--ckpt", s(&a.join("final.ckpt")), "--data", s(&data), "--out", s(&resumed)]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(resumed.join("final.ckpt")).unwrap());
}
