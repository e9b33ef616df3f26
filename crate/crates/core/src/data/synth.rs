//! Seeded multi-scene moving-sprite videos with labelled anomalies.
//!
//! Every scene has its own static textured background and its own normal
//! motion: sprites (squares and discs) drift with a scene-specific velocity and
//! wrap around the frame edges. Test videos carry one anomalous interval of one
//! of three kinds, cycled by video index: a speed jump, a sprite of an unseen
//! shape entering, or a reversed trajectory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{
    frame_file_name, video_dir_name, write_labels, write_meta, ClipParams, DatasetManifest, MetaRow, Split,
    VideoEntry,
};
use super::frame::RawImage;
use crate::config::SynthConfig;
use crate::error::{CrclError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    SpeedJump,
    UnseenShape,
    Reversed,
}

impl AnomalyKind {
    const CYCLE: [AnomalyKind; 3] = [AnomalyKind::SpeedJump, AnomalyKind::UnseenShape, AnomalyKind::Reversed];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnomalySpan {
    pub video_id: usize,
    pub kind: AnomalyKind,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Square,
    Disc,
    Cross,
}

#[derive(Clone, Debug)]
struct Scene {
    background: Vec<[f64; 3]>,
    velocity: (f64, f64),
    sprite_value: f64,
}

#[derive(Clone, Debug)]
struct Sprite {
    shape: Shape,
    pos: (f64, f64),
    vel: (f64, f64),
    /// Frames during which the sprite is drawn.
    visible: (usize, usize),
}

/// What [`synth_generate`] wrote, enough to predict what loading it back yields.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub root: PathBuf,
    pub meta: Vec<MetaRow>,
    pub anomalies: Vec<AnomalySpan>,
    labels: BTreeMap<usize, Vec<u8>>,
}

impl SynthDataset {
    pub fn num_scenes(&self) -> usize {
        self.meta.iter().map(|r| r.scene_id).max().map_or(0, |m| m + 1)
    }

    /// The manifest that loading `split` with `clips` must reproduce.
    pub fn manifest(&self, split: Split, clips: ClipParams) -> DatasetManifest {
        let videos = self
            .meta
            .iter()
            .filter(|r| r.split == split)
            .map(|r| VideoEntry {
                id: r.video_id,
                scene_id: r.scene_id,
                num_frames: r.num_frames,
                labels: (split == Split::Test).then(|| self.labels[&r.video_id].clone()),
            })
            .collect();
        DatasetManifest { root: self.root.clone(), split, num_scenes: self.num_scenes(), videos, clips }
    }

    /// Number of clips `make_clips` yields over a split.
    pub fn clip_count(&self, split: Split, clips: ClipParams) -> usize {
        self.meta
            .iter()
            .filter(|r| r.split == split && r.num_frames >= clips.clip_len)
            .map(|r| (r.num_frames - clips.clip_len) / clips.stride + 1)
            .sum()
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let bad = |m: &str| Err(CrclError::Config(m.to_string()));
    if cfg.num_scenes == 0 {
        return bad("num_scenes must be at least 1");
    }
    if cfg.frame_size < 4 || cfg.sprite_size == 0 || cfg.sprite_size >= cfg.frame_size {
        return bad("need frame_size >= 4 and 0 < sprite_size < frame_size");
    }
    if cfg.train_frames == 0 || cfg.test_frames == 0 {
        return bad("videos need at least one frame");
    }
    if cfg.anomalies > 1 {
        return bad("at most one anomalous interval per test video is supported");
    }
    if cfg.anomalies == 1 {
        let end = if cfg.anomaly_start >= 0 { cfg.anomaly_start as usize + cfg.anomaly_len } else { cfg.anomaly_len };
        if cfg.anomaly_len == 0 || end > cfg.test_frames {
            return Err(CrclError::InvalidArgument(format!(
                "anomaly interval (start {}, length {}) outside video length {}",
                cfg.anomaly_start, cfg.anomaly_len, cfg.test_frames
            )));
        }
    }
    Ok(())
}

fn build_scene(s: usize, n: usize, size: usize, rng: &mut ChaCha8Rng) -> Scene {
    let level = if n == 1 { 90.0 } else { 40.0 + 150.0 * s as f64 / (n - 1) as f64 };
    let theta = rng.random_range(0.0..PI);
    let period = 5.0 + 3.0 * (s % 3) as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let tint = [1.0, 0.92 + 0.04 * (s % 3) as f64, 0.85 + 0.05 * (s % 2) as f64];
    let mut background = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let phase = (x as f64 * ct + y as f64 * st) * 2.0 * PI / period;
            let v = level + 18.0 * phase.sin();
            background.push([v * tint[0], v * tint[1], v * tint[2]]);
        }
    }
    // Directions spread over a half turn, so no scene moves opposite to another
    // and a reversed trajectory is unseen in every scene.
    let angle = PI * s as f64 / n as f64 + PI / 8.0;
    let speed = 1.0 + 0.25 * (s % 3) as f64;
    Scene {
        background,
        velocity: (speed * angle.cos(), speed * angle.sin()),
        sprite_value: if level < 128.0 { 235.0 } else { 20.0 },
    }
}

fn covers(shape: Shape, dx: f64, dy: f64, half: f64) -> bool {
    match shape {
        Shape::Square => dx.abs() <= half && dy.abs() <= half,
        Shape::Disc => dx * dx + dy * dy <= half * half,
        Shape::Cross => {
            dx.abs() <= half && dy.abs() <= half && (dx.abs() <= half / 3.0 || dy.abs() <= half / 3.0)
        }
    }
}

fn wrap_delta(d: f64, size: f64) -> f64 {
    let mut d = d % size;
    if d >= size / 2.0 {
        d -= size;
    } else if d < -size / 2.0 {
        d += size;
    }
    d
}

struct VideoPlan {
    sprites: Vec<Sprite>,
    anomaly: Option<(AnomalyKind, usize, usize)>,
}

fn plan_video(
    cfg: &SynthConfig,
    scene: &Scene,
    frames: usize,
    anomaly: Option<AnomalyKind>,
    rng: &mut ChaCha8Rng,
) -> VideoPlan {
    let size = cfg.frame_size as f64;
    let mut sprites: Vec<Sprite> = (0..cfg.sprites)
        .map(|_| {
            let jitter = rng.random_range(0.85..1.15);
            let turn = rng.random_range(-0.15..0.15f64);
            let (vx, vy) = scene.velocity;
            let (c, s) = (turn.cos(), turn.sin());
            Sprite {
                shape: if rng.random_bool(0.5) { Shape::Square } else { Shape::Disc },
                pos: (rng.random_range(0.0..size), rng.random_range(0.0..size)),
                vel: (jitter * (vx * c - vy * s), jitter * (vx * s + vy * c)),
                visible: (0, frames),
            }
        })
        .collect();
    let anomaly = anomaly.map(|kind| {
        let len = cfg.anomaly_len;
        let start = if cfg.anomaly_start >= 0 {
            cfg.anomaly_start as usize
        } else {
            let hi = frames - len;
            let lo = (frames / 4).min(hi);
            rng.random_range(lo..=hi)
        };
        if kind == AnomalyKind::UnseenShape {
            sprites.push(Sprite {
                shape: Shape::Cross,
                pos: (rng.random_range(0.0..size), rng.random_range(0.0..size)),
                vel: scene.velocity,
                visible: (start, start + len),
            });
        }
        (kind, start, len)
    });
    VideoPlan { sprites, anomaly }
}

fn render_video(cfg: &SynthConfig, scene: &Scene, plan: &VideoPlan, frames: usize, rng: &mut ChaCha8Rng) -> Vec<RawImage> {
    let n = cfg.frame_size;
    let size = n as f64;
    let half = cfg.sprite_size as f64 / 2.0;
    let mut pos: Vec<(f64, f64)> = plan.sprites.iter().map(|s| s.pos).collect();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut px: Vec<[f64; 3]> = scene
            .background
            .iter()
            .map(|c| {
                let noise = rng.random_range(-4.0..4.0);
                [c[0] + noise, c[1] + noise, c[2] + noise]
            })
            .collect();
        for (sprite, p) in plan.sprites.iter().zip(&pos) {
            if t < sprite.visible.0 || t >= sprite.visible.1 {
                continue;
            }
            for y in 0..n {
                let dy = wrap_delta(y as f64 + 0.5 - p.1, size);
                if dy.abs() > half {
                    continue;
                }
                for x in 0..n {
                    let dx = wrap_delta(x as f64 + 0.5 - p.0, size);
                    if covers(sprite.shape, dx, dy, half) {
                        px[y * n + x] = [scene.sprite_value; 3];
                    }
                }
            }
        }
        let data = px.iter().flat_map(|c| c.map(|v| v.round().clamp(0.0, 255.0) as u8)).collect();
        out.push(RawImage { width: n, height: n, channels: 3, data });
        // Advance: velocity of sprite 0 is altered inside the anomalous interval.
        for (i, (sprite, p)) in plan.sprites.iter().zip(pos.iter_mut()).enumerate() {
            let mut v = sprite.vel;
            if let Some((kind, start, len)) = plan.anomaly {
                if i == 0 && t >= start && t < start + len {
                    match kind {
                        AnomalyKind::SpeedJump => v = (3.0 * v.0, 3.0 * v.1),
                        AnomalyKind::Reversed => v = (-v.0, -v.1),
                        AnomalyKind::UnseenShape => {}
                    }
                }
            }
            p.0 = (p.0 + v.0).rem_euclid(size);
            p.1 = (p.1 + v.1).rem_euclid(size);
        }
    }
    out
}

/// Write a synthetic dataset under `root`. The output is a pure function of
/// `(cfg, seed)`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, root: &Path) -> Result<SynthDataset> {
    validate(cfg)?;
    let mut scene_rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<Scene> = (0..cfg.num_scenes)
        .map(|s| build_scene(s, cfg.num_scenes, cfg.frame_size, &mut scene_rng))
        .collect();

    std::fs::create_dir_all(root).map_err(|e| CrclError::io(root, e))?;
    let mut meta = Vec::new();
    let mut labels = BTreeMap::new();
    let mut anomalies = Vec::new();
    for split in [Split::Train, Split::Test] {
        let (per_scene, frames) = match split {
            Split::Train => (cfg.train_videos_per_scene, cfg.train_frames),
            Split::Test => (cfg.test_videos_per_scene, cfg.test_frames),
        };
        for id in 0..per_scene * cfg.num_scenes {
            let scene_id = id / per_scene;
            let scene = &scenes[scene_id];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + (id as u64) * 2 + (split == Split::Test) as u64);
            let kind = (split == Split::Test && cfg.anomalies == 1).then(|| AnomalyKind::CYCLE[id % 3]);
            let plan = plan_video(cfg, scene, frames, kind, &mut rng);
            let images = render_video(cfg, scene, &plan, frames, &mut rng);

            let dir = root.join(split.dir_name()).join(video_dir_name(id));
            std::fs::create_dir_all(&dir).map_err(|e| CrclError::io(&dir, e))?;
            for (i, img) in images.iter().enumerate() {
                img.write_png(&dir.join(frame_file_name(i)))?;
            }
            if split == Split::Test {
                let mut lab = vec![0u8; frames];
                if let Some((kind, start, len)) = plan.anomaly {
                    lab[start..start + len].fill(1);
                    anomalies.push(AnomalySpan { video_id: id, kind, start, len });
                }
                write_labels(&dir, &lab)?;
                labels.insert(id, lab);
            }
            meta.push(MetaRow { video_id: id, split, scene_id, num_frames: frames });
        }
    }
    write_meta(root, &meta)?;
    Ok(SynthDataset { root: root.to_path_buf(), meta, anomalies, labels })
}
