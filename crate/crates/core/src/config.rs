//! Flat `key = value` experiment configuration.
//!
//! Files hold one assignment per line, `#` starts a comment, and every key must
//! be known: a typo is an error rather than a silently ignored setting. The
//! `dataset` key selects a preset that fills in dataset-specific values before
//! the remaining keys are applied, so explicit assignments always win.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CrclError, Result};

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| {
        CrclError::Config(format!(
            "type mismatch for `{key}`: cannot parse `{value}` as {}",
            std::any::type_name::<T>()
        ))
    })
}

macro_rules! flat_config {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( #[doc = $doc:literal] $field:ident : $ty:ty = $default:expr, )*
        }
    ) => {
        $(#[$meta])*
        pub struct $name {
            $( #[doc = $doc] pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl $name {
            /// Every accepted key, in declaration order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];
            const DOCS: &'static [&'static str] = &[$($doc),*];

            fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => self.$field = parse_value::<$ty>(key, value)?, )*
                    _ => return Err(CrclError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), self.$field.to_string()), )*]
            }
        }
    };
}

/// Parsed assignments from a config file plus command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Assignments {
    pairs: BTreeMap<String, String>,
    order: Vec<String>,
}

impl Assignments {
    pub fn parse(text: &str) -> Result<Self> {
        let mut a = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CrclError::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if a.pairs.contains_key(&key) {
                return Err(CrclError::Config(format!("duplicate key `{key}` on line {}", lineno + 1)));
            }
            a.order.push(key.clone());
            a.pairs.insert(key, v.trim().to_string());
        }
        Ok(a)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CrclError::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply `KEY=VALUE` overrides on top; overriding a file key is allowed.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CrclError::Config(format!("override `{o}` is not KEY=VALUE")))?;
            let key = k.trim().to_string();
            if !self.pairs.contains_key(&key) {
                self.order.push(key.clone());
            }
            self.pairs.insert(key, v.trim().to_string());
        }
        Ok(self)
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(String::as_str)
    }

    fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.order.iter().map(|k| (k.as_str(), self.pairs[k].as_str()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Custom,
    Synth,
    Ped2,
    Avenue,
    Shanghaitech,
}

impl FromStr for Preset {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Ok(match s {
            "custom" => Preset::Custom,
            "synth" => Preset::Synth,
            "ped2" => Preset::Ped2,
            "avenue" => Preset::Avenue,
            "shanghaitech" => Preset::Shanghaitech,
            _ => return Err(()),
        })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Custom => "custom",
            Preset::Synth => "synth",
            Preset::Ped2 => "ped2",
            Preset::Avenue => "avenue",
            Preset::Shanghaitech => "shanghaitech",
        })
    }
}

/// How test windows of `b` clips are placed around the scored clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreWindow {
    /// The `b` most recent clips, ending at the scored one.
    Trailing,
    /// `b` clips centred on the scored one (uses future clips).
    Centered,
}

impl FromStr for ScoreWindow {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "trailing" => Ok(ScoreWindow::Trailing),
            "centered" => Ok(ScoreWindow::Centered),
            _ => Err(()),
        }
    }
}

impl fmt::Display for ScoreWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreWindow::Trailing => "trailing",
            ScoreWindow::Centered => "centered",
        })
    }
}

/// How training clips are grouped into batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainBatches {
    /// Clips drawn from the whole training set in shuffled order.
    Shuffled,
    /// Runs of `b` consecutive clips of one video, like a test window.
    Windows,
}

impl FromStr for TrainBatches {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "shuffled" => Ok(TrainBatches::Shuffled),
            "windows" => Ok(TrainBatches::Windows),
            _ => Err(()),
        }
    }
}

impl fmt::Display for TrainBatches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainBatches::Shuffled => "shuffled",
            TrainBatches::Windows => "windows",
        })
    }
}

flat_config! {
    #[derive(Clone, Debug, PartialEq)]
    pub struct TrainConfig {
        /// dataset preset: custom | synth | ped2 | avenue | shanghaitech
        dataset: Preset = Preset::Custom,
        /// dataset root directory (meta.csv, train/, test/)
        data_root: String = String::new(),
        /// frames are resized to frame_size x frame_size
        frame_size: usize = 224,
        /// frames per clip (T)
        clip_len: usize = 8,
        /// sliding-window stride between clips
        clip_stride: usize = 1,
        /// spatial size H = W of feature maps
        feature_size: usize = 16,
        /// channels C of feature maps
        channels: usize = 64,
        /// channels D_c of the compressed attention map (< channels)
        attn_channels: usize = 16,
        /// residual blocks in the characterizer trunk
        cic_blocks: usize = 4,
        /// initial width of the characterizer trunk (doubles once)
        cic_width: usize = 64,
        /// causal factors n
        n: usize = 32,
        /// memory items N
        n_mem: usize = 50,
        /// top-k items kept by the memory read
        k: usize = 8,
        /// K-means clusters
        k_clusters: usize = 10,
        /// batch size b (also the test window length)
        b: usize = 8,
        /// Adam learning rate
        lr: f64 = 8e-5,
        /// epochs without clustering
        phase1_epochs: usize = 20,
        /// epochs with alternating K-means updates
        phase2_epochs: usize = 20,
        /// weight of the cross-branch term in the correlation loss
        lambda: f64 = 10.0,
        /// margin of the memory separateness hinge
        margin_m: f64 = 1.0,
        /// margin of the scene-debiasing triplet hinge
        margin_alpha_m: f64 = 1.0,
        /// weight of the memory compactness + separateness losses
        w_mem: f64 = 1.0,
        /// weight of the cluster loss (phase 2)
        w_cluster: f64 = 1.0,
        /// weight of the scene-debiasing losses
        w_sdl: f64 = 1.0,
        /// master seed for initialization and shuffling
        seed: u64 = 0,
        /// placement of test windows: trailing | centered
        score_window: ScoreWindow = ScoreWindow::Trailing,
        /// grouping of training clips into batches: shuffled | windows
        train_batches: TrainBatches = TrainBatches::Shuffled,
        /// ablation: top-k filtering in the memory read
        filtering: bool = true,
        /// ablation: temporal attention in the motion encoder
        temporal_attention: bool = true,
        /// ablation: average-pooling branch of the decomposer
        avg_pool: bool = true,
        /// ablation: max-pooling branch of the decomposer
        max_pool: bool = true,
        /// ablation: cross-branch correlation term
        c1_term: bool = true,
        /// ablation: shared-branch correlation term
        c2_term: bool = true,
        /// ablation: private-branch correlation term
        c3_term: bool = true,
        /// ablation: clustering loss and cluster distance in the score
        clustering: bool = true,
        /// ablation: scene-debiasing learning
        sdl: bool = true,
    }
}

impl TrainConfig {
    fn apply_preset(&mut self, preset: Preset) {
        self.dataset = preset;
        match preset {
            Preset::Custom => {}
            Preset::Ped2 => {
                self.lambda = 10.0;
                self.k = 8;
            }
            Preset::Avenue => {
                self.lambda = 18.0;
                self.k = 8;
            }
            Preset::Shanghaitech => {
                self.lambda = 20.0;
                self.k = 24;
            }
            Preset::Synth => {
                self.lambda = 10.0;
                self.k = 8;
                self.frame_size = 32;
                self.feature_size = 8;
                self.channels = 32;
                self.attn_channels = 8;
                self.cic_width = 32;
                self.n = 16;
                self.n_mem = 20;
                self.k_clusters = 4;
                self.lr = 1e-3;
            }
        }
    }

    pub fn from_assignments(a: &Assignments) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = a.get("dataset") {
            cfg.apply_preset(parse_value("dataset", p)?);
        }
        for (k, v) in a.iter() {
            if k != "dataset" {
                cfg.set_field(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_str(text: &str, overrides: &[String]) -> Result<Self> {
        Self::from_assignments(&Assignments::parse(text)?.with_overrides(overrides)?)
    }

    /// Read `path` (or start from defaults when `None`) and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let a = match path {
            Some(p) => Assignments::read(p)?,
            None => Assignments::default(),
        };
        Self::from_assignments(&a.with_overrides(overrides)?)
    }

    /// A preset with its defaults and nothing else changed.
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = Self::default();
        cfg.apply_preset(preset);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CrclError::Config(m));
        if self.b < 2 {
            return bad(format!("b = {} but correlation over a batch needs b >= 2", self.b));
        }
        if self.n < 2 {
            return bad("n must be at least 2".into());
        }
        if self.k == 0 || self.k > self.n_mem {
            return bad(format!("k = {} must lie in [1, n_mem = {}]", self.k, self.n_mem));
        }
        if self.attn_channels == 0 || self.attn_channels >= self.channels {
            return bad("attn_channels must be in [1, channels)".into());
        }
        if self.channels < 4 || self.channels % 4 != 0 {
            return bad("channels must be a positive multiple of 4".into());
        }
        if self.feature_size == 0 || self.frame_size < self.feature_size {
            return bad("frame_size must be at least feature_size".into());
        }
        if self.clip_len == 0 || self.clip_stride == 0 {
            return bad("clip_len and clip_stride must be positive".into());
        }
        if self.k_clusters == 0 {
            return bad("k_clusters must be positive".into());
        }
        if !(self.lambda > 0.0) || !(self.lr > 0.0) {
            return bad("lambda and lr must be positive".into());
        }
        if !(self.w_mem > 0.0 && self.w_cluster > 0.0 && self.w_sdl > 0.0) {
            return bad("loss weights must be positive".into());
        }
        if self.margin_m < 0.0 || self.margin_alpha_m < 0.0 {
            return bad("margins must be nonnegative".into());
        }
        if self.cic_blocks == 0 || self.cic_width == 0 {
            return bad("cic_blocks and cic_width must be positive".into());
        }
        Ok(())
    }

    /// Serialized form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Effective top-k (the filter is disabled by reading all items).
    pub fn read_k(&self) -> usize {
        if self.filtering {
            self.k
        } else {
            self.n_mem
        }
    }

    pub fn help_text() -> String {
        help_for(Self::KEYS, Self::DOCS, &Self::default().entries())
    }
}

flat_config! {
    #[derive(Clone, Debug, PartialEq)]
    pub struct SynthConfig {
        /// side length of generated frames
        frame_size: usize = 32,
        /// number of scenes N_s
        num_scenes: usize = 2,
        /// training videos per scene
        train_videos_per_scene: usize = 2,
        /// test videos per scene
        test_videos_per_scene: usize = 2,
        /// frames per training video
        train_frames: usize = 24,
        /// frames per test video
        test_frames: usize = 48,
        /// moving sprites per video
        sprites: usize = 2,
        /// sprite side length in pixels
        sprite_size: usize = 6,
        /// anomalous intervals per test video (0 or 1)
        anomalies: usize = 1,
        /// length of each anomalous interval in frames
        anomaly_len: usize = 16,
        /// fixed start frame of the anomaly; negative picks one at random
        anomaly_start: i64 = -1,
    }
}

impl SynthConfig {
    pub fn from_assignments(a: &Assignments) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in a.iter() {
            cfg.set_field(k, v)?;
        }
        Ok(cfg)
    }

    pub fn parse_str(text: &str, overrides: &[String]) -> Result<Self> {
        Self::from_assignments(&Assignments::parse(text)?.with_overrides(overrides)?)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let a = match path {
            Some(p) => Assignments::read(p)?,
            None => Assignments::default(),
        };
        Self::from_assignments(&a.with_overrides(overrides)?)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn help_text() -> String {
        help_for(Self::KEYS, Self::DOCS, &Self::default().entries())
    }
}

fn help_for(keys: &[&str], docs: &[&str], entries: &[(&str, String)]) -> String {
    let width = keys.iter().map(|k| k.len()).max().unwrap_or(0);
    let mut s = String::new();
    for ((k, d), (_, v)) in keys.iter().zip(docs).zip(entries) {
        s.push_str(&format!("  {k:<width$} = {v:<10} {}\n", d.trim()));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = TrainConfig::parse_str("", &[]).unwrap();
        assert_eq!(cfg.b, 8);
        assert_eq!(cfg.lr, 8e-5);
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn presets_set_lambda_and_k() {
        let sh = TrainConfig::parse_str("dataset = shanghaitech\n", &[]).unwrap();
        assert_eq!((sh.lambda, sh.k), (20.0, 24));
        let av = TrainConfig::parse_str("dataset = avenue", &[]).unwrap();
        assert_eq!((av.lambda, av.k), (18.0, 8));
        let p2 = TrainConfig::parse_str("dataset = ped2", &[]).unwrap();
        assert_eq!((p2.lambda, p2.k), (10.0, 8));
        let explicit = TrainConfig::parse_str("lambda = 20\ndataset = shanghaitech", &[]).unwrap();
        assert_eq!(explicit.lambda, 20.0);
        let over = TrainConfig::parse_str("dataset = shanghaitech", &["lambda=7".into()]).unwrap();
        assert_eq!(over.lambda, 7.0);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = TrainConfig::parse_str("lamda = 20", &[]).unwrap_err();
        assert!(matches!(err, CrclError::UnknownKey(ref k) if k == "lamda"), "{err}");
        assert!(err.to_string().contains("unknown key"));
        assert!(TrainConfig::parse_str("", &["nope=1".into()]).is_err());
    }

    #[test]
    fn duplicate_and_type_errors() {
        assert!(TrainConfig::parse_str("b = 4\nb = 5", &[]).is_err());
        let e = TrainConfig::parse_str("b = four", &[]).unwrap_err();
        assert!(e.to_string().contains("type mismatch"));
        assert!(TrainConfig::parse_str("b = 1", &[]).is_err());
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = TrainConfig::parse_str("# header\n  lr = 1e-4   # tuned\n\nsdl=false\n", &[]).unwrap();
        assert_eq!(cfg.lr, 1e-4);
        assert!(!cfg.sdl);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::preset(Preset::Synth);
        cfg.lr = 0.000123456789;
        cfg.c2_term = false;
        let back = TrainConfig::parse_str(&cfg.to_text(), &[]).unwrap();
        assert_eq!(back, cfg);
        let s = SynthConfig { anomaly_start: 5, ..Default::default() };
        assert_eq!(SynthConfig::parse_str(&s.to_text(), &[]).unwrap(), s);
    }

    #[test]
    fn help_lists_every_key() {
        let h = TrainConfig::help_text();
        for k in TrainConfig::KEYS {
            assert!(h.contains(k), "{k} missing from help");
        }
        assert_eq!(TrainConfig::KEYS.len(), TrainConfig::default().entries().len());
    }
}
