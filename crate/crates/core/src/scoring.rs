//! Per-frame anomaly scores from sliding windows of `b` clips.
//!
//! Every clip's representations depend only on that clip, so they are computed
//! once per clip and windows are assembled from the cached rows.

use std::fs;
use std::path::Path;

use crate::cic::{correlation_matrices, fnorm_sq_from_identity};
use crate::config::ScoreWindow;
use crate::data::{make_clips, Clip, Dataset};
use crate::error::{CrclError, Result};
use crate::eval::fmt_sig;
use crate::model::Model;
use crate::tensor::Tensor;

/// Score of one window and the pieces it is made of.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowScore {
    /// `‖C1 − I‖_F² × D`.
    pub raw: f64,
    /// `‖C1 − I‖_F`.
    pub fnorm: f64,
    /// Distance of the last clip's shared representation to its nearest center
    /// (1 when clustering is disabled).
    pub distance: f64,
    pub c1: Tensor,
}

/// `‖C1 − I‖_F² × D` for given window representations `[b, n]`.
pub fn score_representations(model: &Model, r: &Tensor, r_tilde: &Tensor) -> Result<WindowScore> {
    let t = correlation_matrices(r, r_tilde)?;
    let f2 = fnorm_sq_from_identity(&t.c1);
    let distance = if model.cfg.clustering {
        let clusters = model
            .clusters
            .as_ref()
            .ok_or_else(|| CrclError::InvalidArgument("scoring with clustering enabled needs fitted centers".into()))?;
        let n = r.shape()[1];
        let last = &r.data()[r.data().len() - n..];
        clusters.distance(last)
    } else {
        1.0
    };
    Ok(WindowScore { raw: f2 * distance, fnorm: f2.sqrt(), distance, c1: t.c1 })
}

/// Score a window of exactly `b` clips, given as a `[b, 3, T, S, S]` batch.
pub fn raw_window_score(model: &Model, window: &Tensor) -> Result<WindowScore> {
    if window.shape().first() != Some(&model.cfg.b) {
        return Err(CrclError::InvalidArgument(format!(
            "window of {:?} clips, expected b = {}",
            window.shape().first(),
            model.cfg.b
        )));
    }
    let (_, r, rt) = model.infer(window)?;
    score_representations(model, &r, &rt)
}

/// Per-video max-min normalization; a constant series maps to zeros.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub video_id: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// One scored window, keyed by the frame its score is attached to.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowRecord {
    pub video_id: usize,
    pub frame_index: usize,
    pub label: Option<u8>,
    pub score: WindowScore,
}

/// Representations `(R, R̃)` of every clip, one row per clip.
pub fn clip_representations(model: &Model, ds: &Dataset, clips: &[Clip]) -> Result<(Tensor, Tensor)> {
    let n = model.cfg.n;
    let chunk = model.cfg.b.max(2);
    let (mut r, mut rt) = (Vec::with_capacity(clips.len() * n), Vec::with_capacity(clips.len() * n));
    let mut start = 0;
    while start < clips.len() {
        let end = (start + chunk).min(clips.len());
        let mut refs: Vec<&Clip> = clips[start..end].iter().collect();
        let real = refs.len();
        // The characterizer needs two items; a lone clip is paired with itself.
        if real == 1 {
            refs.push(refs[0]);
        }
        let (_, a, b) = model.infer(&ds.batch_tensor(&refs))?;
        r.extend_from_slice(&a.data()[..real * n]);
        rt.extend_from_slice(&b.data()[..real * n]);
        start = end;
    }
    Ok((Tensor::new(&[clips.len(), n], r)?, Tensor::new(&[clips.len(), n], rt)?))
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let n = t.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        out.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
    }
    Tensor::new(&[idx.len(), n], out).expect("row gather")
}

/// Clip indices of the window attached to clip `j` out of `m`. Videos with fewer
/// than `b` clips pad the front with copies of the first clip.
pub fn window_indices(j: usize, m: usize, b: usize, mode: ScoreWindow) -> Vec<usize> {
    if m < b {
        let mut idx = vec![0; b - m];
        idx.extend(0..m);
        return idx;
    }
    let start = match mode {
        ScoreWindow::Trailing => (j + 1).saturating_sub(b),
        ScoreWindow::Centered => j.saturating_sub(b / 2).min(m - b),
    };
    (start..start + b).collect()
}

/// Score every frame of one video.
pub fn score_video(model: &Model, ds: &Dataset, video_id: usize) -> Result<(ScoreSeries, Vec<WindowRecord>)> {
    let video = ds.manifest.video(video_id)?.clone();
    let clips = make_clips(&ds.manifest, video_id)?;
    let (r, rt) = clip_representations(model, ds, &clips)?;
    let b = model.cfg.b;
    let mut per_frame: Vec<Option<f64>> = vec![None; video.num_frames];
    let mut records = Vec::with_capacity(clips.len());
    let mut cache: Option<(Vec<usize>, WindowScore)> = None;
    for (j, clip) in clips.iter().enumerate() {
        let idx = window_indices(j, clips.len(), b, model.cfg.score_window);
        let score = match &cache {
            Some((prev, s)) if *prev == idx => s.clone(),
            _ => {
                let s = score_representations(model, &rows(&r, &idx), &rows(&rt, &idx))?;
                cache = Some((idx, s.clone()));
                s
            }
        };
        per_frame[clip.frame_index] = Some(score.raw);
        records.push(WindowRecord {
            video_id,
            frame_index: clip.frame_index,
            label: video.labels.as_ref().map(|l| l[clip.frame_index]),
            score,
        });
    }
    let first = per_frame.iter().flatten().next().copied().expect("a video has at least one clip");
    let mut raw = Vec::with_capacity(per_frame.len());
    let mut last = first;
    for v in per_frame {
        if let Some(v) = v {
            last = v;
        }
        raw.push(last);
    }
    let normalized = normalize(&raw);
    Ok((ScoreSeries { video_id, raw, normalized }, records))
}

/// Score every video of a split, in manifest order.
pub fn score_dataset(model: &Model, ds: &Dataset) -> Result<Vec<(ScoreSeries, Vec<WindowRecord>)>> {
    ds.manifest.videos.iter().map(|v| score_video(model, ds, v.id)).collect()
}

pub fn score_file_name(video_id: usize) -> String {
    format!("video_{video_id:03}.csv")
}

/// Write `scores/video_<id>.csv` under `out_dir`.
pub fn write_scores(out_dir: &Path, series: &ScoreSeries) -> Result<()> {
    let dir = out_dir.join("scores");
    fs::create_dir_all(&dir).map_err(|e| CrclError::io(&dir, e))?;
    let mut s = String::from("frame_index,raw,normalized\n");
    for (i, (r, n)) in series.raw.iter().zip(&series.normalized).enumerate() {
        s.push_str(&format!("{i},{},{}\n", fmt_sig(*r), fmt_sig(*n)));
    }
    let path = dir.join(score_file_name(series.video_id));
    fs::write(&path, s).map_err(|e| CrclError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cic::ClusterModel;
    use crate::config::TrainConfig;

    fn model(clustering: bool) -> Model {
        let cfg = TrainConfig {
            frame_size: 8,
            clip_len: 4,
            feature_size: 4,
            channels: 8,
            attn_channels: 4,
            cic_width: 4,
            cic_blocks: 2,
            n: 2,
            n_mem: 6,
            k: 2,
            k_clusters: 2,
            b: 2,
            clustering,
            ..TrainConfig::default()
        };
        Model::new(&cfg, 1).unwrap()
    }

    #[test]
    fn identity_c1_at_center_scores_zero() {
        let mut m = model(true);
        let r = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        m.clusters = Some(ClusterModel::from_centers(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap()).unwrap());
        let s = score_representations(&m, &r, &r).unwrap();
        assert_eq!(s.raw, 0.0);
    }

    #[test]
    fn hand_product() {
        let mut m = model(true);
        let r = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let rt = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        // Columns f1 = (1,0), f2 = (0,1), g1 = g2 = (0,1): C1 = [[0,0],[1,1]], ‖C1 − I‖² = 2.
        // The last row (0,1) lies at distance 3 from the center (0,4).
        m.clusters = Some(ClusterModel::from_centers(Tensor::new(&[1, 2], vec![0.0, 4.0]).unwrap()).unwrap());
        let s = score_representations(&m, &r, &rt).unwrap();
        assert!((s.fnorm.powi(2) - 2.0).abs() < 1e-12);
        assert_eq!(s.distance, 3.0);
        assert!((s.raw - 6.0).abs() < 1e-12);
    }

    #[test]
    fn no_clustering_means_unit_distance() {
        let m = model(false);
        let r = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let rt = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let s = score_representations(&m, &r, &rt).unwrap();
        assert_eq!(s.distance, 1.0);
        assert!((s.raw - 2.0).abs() < 1e-12);
        assert!(score_representations(&model(true), &r, &rt).is_err());
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize(&[2.0, 4.0, 8.0]), vec![0.0, 1.0 / 3.0, 1.0]);
        assert_eq!(normalize(&[5.0; 4]), vec![0.0; 4]);
        let raw = [0.3, 1.7, 0.2, 9.1, 4.4];
        let mapped: Vec<f64> = raw.iter().map(|v| 3.5 * v + 11.0).collect();
        for (a, b) in normalize(&raw).iter().zip(normalize(&mapped)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn window_placement() {
        assert_eq!(window_indices(0, 10, 3, ScoreWindow::Trailing), vec![0, 1, 2]);
        assert_eq!(window_indices(1, 10, 3, ScoreWindow::Trailing), vec![0, 1, 2]);
        assert_eq!(window_indices(5, 10, 3, ScoreWindow::Trailing), vec![3, 4, 5]);
        assert_eq!(window_indices(5, 10, 3, ScoreWindow::Centered), vec![4, 5, 6]);
        assert_eq!(window_indices(9, 10, 3, ScoreWindow::Centered), vec![7, 8, 9]);
        assert_eq!(window_indices(1, 2, 4, ScoreWindow::Trailing), vec![0, 0, 0, 1]);
    }
}
