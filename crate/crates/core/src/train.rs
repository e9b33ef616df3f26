//! Loss assembly and the two-phase training loop.

use std::fmt::Write as _;

use crate::autograd::{Graph, Var};
use crate::cic::{cluster_loss, correlation_loss_var, kmeans, CorrelationTerms};
use crate::config::{TrainBatches, TrainConfig};
use crate::data::{epoch_batches, epoch_windows, Clip, Dataset};
use crate::error::{CrclError, Result};
use crate::memory::{memory_losses, memory_write};
use crate::model::Model;
use crate::nn::Bound;
use crate::optim::Adam;
use crate::sdl::{kl_mutual_loss, scene_ce_loss, triplet_consistency_loss};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Correlation, memory, and scene-debiasing losses only.
    One,
    /// Adds the cluster loss against centers refit every epoch.
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

/// Scalar value of every loss term; disabled terms read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_c: f64,
    pub compact: f64,
    pub separate: f64,
    pub cluster: f64,
    pub cs: f64,
    pub cm: f64,
    pub kl: f64,
    pub t: f64,
}

impl LossBreakdown {
    fn values(&self) -> [f64; 9] {
        [self.total, self.l_c, self.compact, self.separate, self.cluster, self.cs, self.cm, self.kl, self.t]
    }

    fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let mut acc = [0.0; 9];
        for it in items {
            for (a, v) in acc.iter_mut().zip(it.values()) {
                *a += v;
            }
        }
        let k = items.len().max(1) as f64;
        let [total, l_c, compact, separate, cluster, cs, cm, kl, t] = acc.map(|v| v / k);
        LossBreakdown { total, l_c, compact, separate, cluster, cs, cm, kl, t }
    }
}

pub struct LossOutputs {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Motion features, used afterwards for the memory write.
    pub f_ent: Var,
}

/// `L = L_c + w_mem(L_compact + L_separate) + [phase 2] w_cluster L_cluster
///      + [scene debiasing] w_sdl (L_cs + L_cm + L_KL + L_t)`.
pub fn total_loss(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    clips: Var,
    scene_labels: &[usize],
    phase: Phase,
) -> Result<LossOutputs> {
    let cfg = &model.cfg;
    let sdl = model.sdl_active();
    let out = model.forward(g, p, clips, sdl)?;
    let m = out.motion;
    let mut bd = LossBreakdown::default();
    let mut terms: Vec<Var> = Vec::new();

    let corr = CorrelationTerms { c1: cfg.c1_term, c2: cfg.c2_term, c3: cfg.c3_term };
    if let Some(lc) = correlation_loss_var(g, &m.triple, cfg.lambda, corr) {
        bd.l_c = g.value(lc).item();
        terms.push(lc);
    }

    let (compact, separate) = memory_losses(g, &model.memory, m.features, cfg.margin_m)?;
    bd.compact = g.value(compact).item();
    bd.separate = g.value(separate).item();
    let mem = g.add(compact, separate);
    terms.push(g.scale(mem, cfg.w_mem));

    if phase == Phase::Two && cfg.clustering {
        let lcl = cluster_loss(g, m.r, model.clusters.as_ref())?;
        bd.cluster = g.value(lcl).item();
        terms.push(g.scale(lcl, cfg.w_cluster));
    }

    if let Some(s) = out.scene {
        let cs = scene_ce_loss(g, s.p_scene, scene_labels)?;
        let cm = scene_ce_loss(g, s.p_motion, scene_labels)?;
        let kl = kl_mutual_loss(g, s.p_scene, s.p_motion)?;
        let t = triplet_consistency_loss(g, &m.triple, &s.branch.triple, cfg.lambda, cfg.margin_alpha_m);
        bd.cs = g.value(cs).item();
        bd.cm = g.value(cm).item();
        bd.kl = g.value(kl).item();
        bd.t = g.value(t).item();
        let a = g.add(cs, cm);
        let b = g.add(kl, t);
        let s = g.add(a, b);
        terms.push(g.scale(s, cfg.w_sdl));
    }

    let total = terms.into_iter().reduce(|a, b| g.add(a, b)).expect("memory terms are always present");
    bd.total = g.value(total).item();
    if !bd.total.is_finite() {
        return Err(CrclError::NonFinite("training loss"));
    }
    Ok(LossOutputs { total, breakdown: bd, f_ent: m.features })
}

/// Per-epoch record written to the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub mean: LossBreakdown,
    pub batch_totals: Vec<f64>,
}

pub const LOG_HEADER: &str = "epoch,phase,L_total,L_c,L_compact,L_separate,L_cluster,L_cs,L_cm,L_KL,L_t";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{}", r.epoch, r.phase.number());
        for v in r.mean.values() {
            let _ = write!(s, ",{}", crate::eval::fmt_sig(v));
        }
        s.push('\n');
    }
    s
}

/// Shuffle seed for one epoch, a pure function of the master seed and the epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Lengths of the runs of consecutive clips that share a video.
fn video_runs(clips: &[Clip]) -> Vec<usize> {
    let mut runs: Vec<usize> = Vec::new();
    for (i, c) in clips.iter().enumerate() {
        match runs.last_mut() {
            Some(n) if clips[i - 1].video_id == c.video_id => *n += 1,
            _ => runs.push(1),
        }
    }
    runs
}

/// Mutable training state: the model, optimizer moments, and epochs completed.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, num_scenes: usize) -> Result<Self> {
        let model = Model::new(cfg, num_scenes)?;
        let adam = Adam::new(&model.store, cfg.lr);
        Ok(Self { model, adam, epoch: 0, log: Vec::new() })
    }

    /// Serialized training state (see [`crate::checkpoint`]).
    pub fn checkpoint(&self) -> Vec<u8> {
        crate::checkpoint::encode(self)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        crate::checkpoint::decode(bytes)
    }

    pub fn total_epochs(&self) -> usize {
        self.model.cfg.phase1_epochs + self.model.cfg.phase2_epochs
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.model.cfg.phase1_epochs {
            Phase::One
        } else {
            Phase::Two
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.total_epochs()
    }

    /// One optimizer step on a batch followed by the memory write.
    pub fn step(&mut self, clips: Tensor, scene_labels: &[usize], phase: Phase) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let p = self.model.store.bind(&mut g, true);
        let x = g.input(clips);
        let out = total_loss(&mut g, &p, &self.model, x, scene_labels, phase)?;
        let mut grads = g.backward(out.total);
        let grads = p.collect(&self.model.store, &mut grads);
        self.adam.update(&mut self.model.store, &grads);
        self.model.memory = memory_write(&self.model.memory, g.value(out.f_ent))?;
        Ok(out.breakdown)
    }

    /// Shared-branch representations of every clip under the current parameters.
    pub fn representations(&self, ds: &Dataset, clips: &[Clip]) -> Result<Tensor> {
        let b = self.model.cfg.b;
        let mut rows: Vec<f64> = Vec::new();
        let mut start = 0;
        while start < clips.len() {
            let mut end = (start + b).min(clips.len());
            if clips.len() - end == 1 {
                end += 1;
            }
            let refs: Vec<&Clip> = clips[start..end].iter().collect();
            if refs.len() < 2 {
                return Err(CrclError::Dataset("need at least two clips for representations".into()));
            }
            let (_, r, _) = self.model.infer(&ds.batch_tensor(&refs))?;
            rows.extend_from_slice(r.data());
            start = end;
        }
        Tensor::new(&[clips.len(), self.model.cfg.n], rows)
    }

    /// Refit the K-means centers on the shared-branch representations.
    pub fn refit_clusters(&mut self, ds: &Dataset, clips: &[Clip]) -> Result<()> {
        let reps = self.representations(ds, clips)?;
        let (model, _) = kmeans(&reps, self.model.cfg.k_clusters, epoch_seed(self.model.cfg.seed, self.epoch) ^ 0x5eed)?;
        self.model.clusters = Some(model);
        Ok(())
    }

    pub fn train_epoch(&mut self, ds: &Dataset, clips: &[Clip]) -> Result<EpochLog> {
        let cfg = self.model.cfg.clone();
        let phase = self.phase_of(self.epoch);
        if phase == Phase::Two && cfg.clustering {
            self.refit_clusters(ds, clips)?;
        }
        let seed = epoch_seed(cfg.seed, self.epoch);
        let batches = match cfg.train_batches {
            TrainBatches::Shuffled => epoch_batches(clips.len(), cfg.b, true, seed)?,
            TrainBatches::Windows => epoch_windows(&video_runs(clips), cfg.b, seed)?,
        };
        if batches.is_empty() {
            return Err(CrclError::Dataset(format!("{} training clips cannot fill a batch of {}", clips.len(), cfg.b)));
        }
        let mut parts = Vec::with_capacity(batches.len());
        for idx in &batches {
            let refs: Vec<&Clip> = idx.iter().map(|&i| &clips[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|c| c.scene_id).collect();
            parts.push(self.step(ds.batch_tensor(&refs), &labels, phase)?);
        }
        let entry = EpochLog {
            epoch: self.epoch,
            phase,
            mean: LossBreakdown::mean(&parts),
            batch_totals: parts.iter().map(|b| b.total).collect(),
        };
        log::info!(
            "epoch {} phase {} loss {:.6} (L_c {:.4}, mem {:.4}+{:.4}, cluster {:.4}, sdl {:.4}/{:.4}/{:.4}/{:.4})",
            entry.epoch,
            phase.number(),
            entry.mean.total,
            entry.mean.l_c,
            entry.mean.compact,
            entry.mean.separate,
            entry.mean.cluster,
            entry.mean.cs,
            entry.mean.cm,
            entry.mean.kl,
            entry.mean.t
        );
        self.epoch += 1;
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Train through every remaining epoch, then fit the centers used for scoring.
    pub fn run(&mut self, ds: &Dataset) -> Result<()> {
        let clips = ds.all_clips()?;
        while !self.is_done() {
            self.train_epoch(ds, &clips)?;
        }
        if self.model.cfg.clustering {
            self.refit_clusters(ds, &clips)?;
        }
        Ok(())
    }
}

/// Train a fresh model on `ds`. Scene debiasing is switched off with a warning
/// when the data holds a single scene.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<Trainer> {
    let num_scenes = ds.manifest.num_scenes;
    if cfg.sdl && num_scenes < 2 {
        log::warn!("scene debiasing disabled: the training data has a single scene");
    }
    if cfg.frame_size != ds.frame_size || cfg.clip_len != ds.manifest.clips.clip_len {
        return Err(CrclError::Config(format!(
            "dataset loaded at frame_size {} clip_len {} but config asks for {} and {}",
            ds.frame_size, ds.manifest.clips.clip_len, cfg.frame_size, cfg.clip_len
        )));
    }
    let mut trainer = Trainer::new(cfg, num_scenes)?;
    trainer.run(ds)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            frame_size: 8,
            clip_len: 4,
            feature_size: 4,
            channels: 8,
            attn_channels: 4,
            cic_width: 4,
            cic_blocks: 2,
            n: 4,
            n_mem: 6,
            k: 2,
            k_clusters: 2,
            b: 3,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn video_runs_counts_consecutive_clips() {
        let clip = |video_id| Clip { video_id, scene_id: 0, start: 0, frame_index: 0, len: 1, labels: None };
        let clips: Vec<Clip> = [0, 0, 0, 2, 2, 1].into_iter().map(clip).collect();
        assert_eq!(video_runs(&clips), vec![3, 2, 1]);
        assert!(video_runs(&[]).is_empty());
    }

    fn batch(seed: u64) -> Tensor {
        let n = 3 * 3 * 4 * 8 * 8;
        Tensor::new(
            &[3, 3, 4, 8, 8],
            (0..n).map(|i| (((i as u64 * 2654435761 + seed * 7919) % 2001) as f64 / 1000.0) - 1.0).collect(),
        )
        .unwrap()
    }

    fn loss_and_grads(model: &Model, phase: Phase) -> (LossBreakdown, Vec<Tensor>) {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true);
        let x = g.input(batch(1));
        let out = total_loss(&mut g, &p, model, x, &[0, 1, 0], phase).unwrap();
        let mut grads = g.backward(out.total);
        (out.breakdown, p.collect(&model.store, &mut grads))
    }

    #[test]
    fn breakdown_sums_to_total() {
        let m = Model::new(&tiny_cfg(), 2).unwrap();
        let (bd, _) = loss_and_grads(&m, Phase::One);
        let sum = bd.l_c + bd.compact + bd.separate + bd.cs + bd.cm + bd.kl + bd.t;
        assert!((bd.total - sum).abs() < 1e-9 * sum.abs().max(1.0));
        assert_eq!(bd.cluster, 0.0);
    }

    #[test]
    fn flag_algebra() {
        let cfg = TrainConfig { c2_term: false, c3_term: false, sdl: false, clustering: false, ..tiny_cfg() };
        let m = Model::new(&cfg, 2).unwrap();
        let (bd, _) = loss_and_grads(&m, Phase::Two);
        let (_, r, rt) = m.infer(&batch(1)).unwrap();
        let tr = crate::cic::correlation_matrices(&r, &rt).unwrap();
        let want_c = cfg.lambda * crate::cic::fnorm_sq_from_identity(&tr.c1);
        assert!((bd.l_c - want_c).abs() < 1e-9);
        assert!((bd.total - (bd.l_c + bd.compact + bd.separate)).abs() < 1e-9);
        assert_eq!((bd.cluster, bd.cs, bd.cm, bd.kl, bd.t), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn phase_two_requires_fitted_clusters() {
        let m = Model::new(&tiny_cfg(), 2).unwrap();
        let mut g = Graph::new();
        let p = m.store.bind(&mut g, true);
        let x = g.input(batch(1));
        assert!(total_loss(&mut g, &p, &m, x, &[0, 1, 0], Phase::Two).is_err());
    }

    #[test]
    fn disabled_term_contributes_zero_gradient() {
        // Gradients with C2 off equal the full gradients minus the gradients of
        // the C2 term alone.
        let full = Model::new(&tiny_cfg(), 2).unwrap();
        let off = Model::new(&TrainConfig { c2_term: false, ..tiny_cfg() }, 2).unwrap();
        let (_, g_full) = loss_and_grads(&full, Phase::One);
        let (_, g_off) = loss_and_grads(&off, Phase::One);
        let mut g = Graph::new();
        let p = full.store.bind(&mut g, true);
        let x = g.input(batch(1));
        let out = full.forward(&mut g, &p, x, false).unwrap();
        let only = CorrelationTerms { c1: false, c2: true, c3: false };
        let l2 = correlation_loss_var(&mut g, &out.motion.triple, full.cfg.lambda, only).unwrap();
        let mut gr = g.backward(l2);
        let g_c2 = p.collect(&full.store, &mut gr);
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for ((a, b), c) in g_full.iter().zip(&g_off).zip(&g_c2) {
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
                worst = worst.max((x - z - y).abs());
                scale = scale.max(x.abs());
            }
        }
        assert!(worst <= 1e-9 * scale.max(1.0), "residual {worst}");
    }

    #[test]
    fn step_changes_parameters_and_memory_deterministically() {
        let run = || {
            let mut t = Trainer::new(&tiny_cfg(), 2).unwrap();
            let bd = t.step(batch(2), &[0, 1, 1], Phase::One).unwrap();
            (t.model.store.clone(), t.model.memory.clone(), bd)
        };
        let (s1, m1, b1) = run();
        let (s2, m2, b2) = run();
        assert_eq!((s1.clone(), m1.clone(), b1), (s2, m2, b2));
        let fresh = Model::new(&tiny_cfg(), 2).unwrap();
        assert_ne!(s1, fresh.store);
        assert_ne!(m1, fresh.memory);
    }

    #[test]
    fn epoch_seed_varies() {
        assert_ne!(epoch_seed(0, 0), epoch_seed(0, 1));
        assert_ne!(epoch_seed(0, 3), epoch_seed(1, 3));
    }

    #[test]
    fn log_has_header_and_rows() {
        let rows = vec![EpochLog { epoch: 0, phase: Phase::One, mean: LossBreakdown::default(), batch_totals: vec![] }];
        let csv = log_csv(&rows);
        assert!(csv.starts_with(LOG_HEADER));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 11);
    }
}
