//! Frame-level ROC AUC and EER, the F-norm gap, and CSV export.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{CrclError, Result};
use crate::model::Model;
use crate::scoring::{score_dataset, ScoreSeries, WindowRecord};
use crate::tensor::Tensor;

/// Format with 9 significant digits.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { format!("{v}") };
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..=9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

fn class_counts(labels: &[u8], len: usize) -> Result<(usize, usize)> {
    if labels.len() != len {
        return Err(CrclError::Shape(format!("{len} scores but {} labels", labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CrclError::SingleClass);
    }
    Ok((pos, neg))
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CrclError::NonFinite("scores"));
    }
    Ok(())
}

/// Area under the ROC curve as the normalized Mann–Whitney statistic; tied
/// positive/negative pairs count one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(labels, scores.len())?;
    check_scores(scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Twice the rank sum of the positives keeps tie midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u128;
        let npos = order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        twice_rank_sum += twice_mid * npos;
        i = j + 1;
    }
    let p = pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// ROC vertices `(fpr, tpr, threshold)` for thresholds at each distinct score,
/// from `(0, 0, +inf)` to `(1, 1, min score)`. A frame is flagged when its score
/// is at least the threshold.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, neg) = class_counts(labels, scores.len())?;
    check_scores(scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut pts = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64, s));
    }
    Ok(pts)
}

/// Equal error rate: where FPR meets 1 − TPR, linearly interpolated between
/// adjacent ROC vertices.
pub fn eer(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pts = roc_curve(scores, labels)?;
    for w in pts.windows(2) {
        let (f0, t0, _) = w[0];
        let (f1, t1, _) = w[1];
        let d0 = f0 - (1.0 - t0);
        let d1 = f1 - (1.0 - t1);
        if d0 <= 0.0 && d1 >= 0.0 {
            if d1 == d0 {
                return Ok(f0);
            }
            let t = d0 / (d0 - d1);
            let fpr = f0 + t * (f1 - f0);
            let fnr = (1.0 - t0) + t * ((1.0 - t1) - (1.0 - t0));
            return Ok(0.5 * (fpr + fnr));
        }
    }
    unreachable!("ROC runs from (0,0) to (1,1) and must cross the anti-diagonal")
}

/// Mean ‖C1 − I‖_F over normal and abnormal windows, and their difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FnormGap {
    pub normal_mean: f64,
    pub abnormal_mean: f64,
    pub gap: f64,
    pub normal_windows: usize,
    pub abnormal_windows: usize,
}

/// `windows` pairs a window's ‖C1 − I‖_F with the label of its last frame.
pub fn fnorm_gap(windows: &[(f64, u8)]) -> Result<FnormGap> {
    let (mut sn, mut na, mut sa, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for &(f, l) in windows {
        if l != 0 {
            sa += f;
            na += 1;
        } else {
            sn += f;
            nn += 1;
        }
    }
    if na == 0 {
        return Err(CrclError::NoAbnormalFrames);
    }
    if nn == 0 {
        return Err(CrclError::SingleClass);
    }
    let (normal_mean, abnormal_mean) = (sn / nn as f64, sa / na as f64);
    Ok(FnormGap { normal_mean, abnormal_mean, gap: abnormal_mean - normal_mean, normal_windows: nn, abnormal_windows: na })
}

pub fn write_roc_csv(path: &Path, pts: &[(f64, f64, f64)]) -> Result<()> {
    let mut s = String::from("fpr,tpr,threshold\n");
    for &(f, t, th) in pts {
        s.push_str(&format!("{},{},{}\n", fmt_sig(f), fmt_sig(t), fmt_sig(th)));
    }
    fs::write(path, s).map_err(|e| CrclError::io(path, e))
}

pub fn read_roc_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| CrclError::io(path, e))?;
    let bad = |l: &str| CrclError::Dataset(format!("{}: bad ROC row `{l}`", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad(l))?;
            if v.len() != 3 {
                return Err(bad(l));
            }
            Ok((v[0], v[1], v[2]))
        })
        .collect()
}

/// Trapezoidal area under a ROC polyline.
pub fn auc_from_curve(pts: &[(f64, f64, f64)]) -> f64 {
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Write a square matrix as CSV rows.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let cols = *m.shape().last().unwrap_or(&1);
    let mut s = String::new();
    for row in m.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|&v| fmt_sig(v)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| CrclError::io(path, e))
}

/// Frame-level results over a labeled test split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Micro AUC over all frames of all videos.
    pub auc: f64,
    pub eer: f64,
    /// Per-video AUC; `None` for videos whose frames are all one class.
    pub per_video_auc: Vec<(usize, Option<f64>)>,
    pub fnorm: FnormGap,
}

/// Labeled frames of every video, concatenated in manifest order.
fn frame_labels(ds: &Dataset) -> Result<Vec<Vec<u8>>> {
    ds.manifest
        .videos
        .iter()
        .map(|v| {
            v.labels
                .clone()
                .ok_or_else(|| CrclError::MissingLabels(ds.manifest.video_dir(v)))
        })
        .collect()
}

/// Score every test video and compute AUC, EER, and the F-norm gap.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<(EvalReport, Vec<ScoreSeries>, Vec<WindowRecord>)> {
    let labels = frame_labels(ds)?;
    let scored = score_dataset(model, ds)?;
    let mut all_s = Vec::new();
    let mut all_y = Vec::new();
    let mut per_video = Vec::new();
    let mut series = Vec::new();
    let mut windows = Vec::new();
    for ((s, w), y) in scored.into_iter().zip(&labels) {
        all_s.extend_from_slice(&s.normalized);
        all_y.extend_from_slice(y);
        per_video.push((s.video_id, roc_auc(&s.normalized, y).ok()));
        series.push(s);
        windows.extend(w);
    }
    let pairs: Vec<(f64, u8)> = windows.iter().map(|w| (w.score.fnorm, w.label.unwrap_or(0))).collect();
    let report = EvalReport {
        auc: roc_auc(&all_s, &all_y)?,
        eer: eer(&all_s, &all_y)?,
        per_video_auc: per_video,
        fnorm: fnorm_gap(&pairs)?,
    };
    Ok((report, series, windows))
}

/// Mean ‖C1 − I‖_F over windows ending on normal vs abnormal frames.
pub fn fnorm_gap_report(model: &Model, ds: &Dataset) -> Result<FnormGap> {
    frame_labels(ds)?;
    let mut pairs = Vec::new();
    for (_, w) in score_dataset(model, ds)? {
        pairs.extend(w.iter().map(|w| (w.score.fnorm, w.label.unwrap_or(0))));
    }
    fnorm_gap(&pairs)
}

/// Write `roc.csv`, per-video score CSVs, and C1 dumps for the selected windows.
pub fn export_curves(
    out_dir: &Path,
    all_scores: &[f64],
    all_labels: &[u8],
    series: &[ScoreSeries],
    selected: &[(&str, &WindowRecord)],
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| CrclError::io(out_dir, e))?;
    write_roc_csv(&out_dir.join("roc.csv"), &roc_curve(all_scores, all_labels)?)?;
    for s in series {
        crate::scoring::write_scores(out_dir, s)?;
    }
    for (name, w) in selected {
        write_matrix_csv(&out_dir.join(format!("c1_matrix_{name}.csv")), &w.score.c1)?;
    }
    Ok(())
}
