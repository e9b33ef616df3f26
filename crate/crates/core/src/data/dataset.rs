//! Frame-folder datasets.
//!
//! Layout:
//!
//! ```text
//! root/meta.csv                          video_id,split,scene_id,num_frames
//! root/{train,test}/video_<id>/frame_<000000>.png
//! root/test/video_<id>/labels.csv        frame_index,label   (one line per frame)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::frame::{preprocess, Frame, RawImage};
use crate::error::{CrclError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = CrclError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(CrclError::Dataset(format!("unknown split `{s}`"))),
        }
    }
}

pub fn video_dir_name(id: usize) -> String {
    format!("video_{id:03}")
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

/// Clip construction parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipParams {
    pub clip_len: usize,
    pub stride: usize,
}

impl Default for ClipParams {
    fn default() -> Self {
        Self { clip_len: 8, stride: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEntry {
    pub id: usize,
    pub scene_id: usize,
    pub num_frames: usize,
    /// Per-frame anomaly flags; present exactly for the test split.
    pub labels: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub num_scenes: usize,
    pub videos: Vec<VideoEntry>,
    pub clips: ClipParams,
}

impl DatasetManifest {
    pub fn video_dir(&self, v: &VideoEntry) -> PathBuf {
        self.root.join(self.split.dir_name()).join(video_dir_name(v.id))
    }

    pub fn video(&self, id: usize) -> Result<&VideoEntry> {
        self.videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| CrclError::Dataset(format!("no video {id} in {} split", self.split)))
    }

    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(|v| v.num_frames).sum()
    }
}

/// One row of `meta.csv`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaRow {
    pub video_id: usize,
    pub split: Split,
    pub scene_id: usize,
    pub num_frames: usize,
}

pub const META_HEADER: &str = "video_id,split,scene_id,num_frames";

pub fn write_meta(root: &Path, rows: &[MetaRow]) -> Result<()> {
    let mut s = String::from(META_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.video_id, r.split, r.scene_id, r.num_frames));
    }
    let p = root.join("meta.csv");
    std::fs::write(&p, s).map_err(|e| CrclError::io(&p, e))
}

pub fn read_meta(root: &Path) -> Result<Vec<MetaRow>> {
    let p = root.join("meta.csv");
    let text = std::fs::read_to_string(&p).map_err(|e| CrclError::io(&p, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == META_HEADER) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || CrclError::Dataset(format!("meta.csv line {}: malformed `{line}`", i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        rows.push(MetaRow {
            video_id: f[0].parse().map_err(|_| bad())?,
            split: f[1].parse()?,
            scene_id: f[2].parse().map_err(|_| bad())?,
            num_frames: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

pub fn write_labels(dir: &Path, labels: &[u8]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 8);
    for (i, l) in labels.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    let p = dir.join("labels.csv");
    std::fs::write(&p, s).map_err(|e| CrclError::io(&p, e))
}

fn read_labels(dir: &Path, num_frames: usize) -> Result<Vec<u8>> {
    let p = dir.join("labels.csv");
    if !p.is_file() {
        return Err(CrclError::MissingLabels(p));
    }
    let text = std::fs::read_to_string(&p).map_err(|e| CrclError::io(&p, e))?;
    let mut labels = vec![None; num_frames];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || CrclError::Dataset(format!("{} line {}: malformed `{line}`", p.display(), i + 1));
        let (idx, lab) = line.split_once(',').ok_or_else(bad)?;
        let idx: usize = idx.trim().parse().map_err(|_| bad())?;
        let lab: u8 = lab.trim().parse().map_err(|_| bad())?;
        if idx >= num_frames || lab > 1 {
            return Err(bad());
        }
        labels[idx] = Some(lab);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| CrclError::Dataset(format!("{}: no label for frame {i}", p.display()))))
        .collect()
}

/// Count `frame_XXXXXX.png` files and check that indices are `0..count` with no gaps.
fn count_frames(dir: &Path) -> Result<usize> {
    let entries = std::fs::read_dir(dir).map_err(|e| CrclError::io(dir, e))?;
    let mut indices = Vec::new();
    for e in entries {
        let e = e.map_err(|e| CrclError::io(dir, e))?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name.strip_prefix("frame_").and_then(|r| r.strip_suffix(".png")) {
            let idx: usize = num
                .parse()
                .map_err(|_| CrclError::Dataset(format!("{}: bad frame file name `{name}`", dir.display())))?;
            indices.push(idx);
        }
    }
    if indices.is_empty() {
        return Err(CrclError::Dataset(format!("{}: empty video", dir.display())));
    }
    indices.sort_unstable();
    for (expect, got) in indices.iter().enumerate() {
        if *got != expect {
            return Err(CrclError::Dataset(format!(
                "{}: non-contiguous frame indices (expected frame {expect}, found {got})",
                dir.display()
            )));
        }
    }
    Ok(indices.len())
}

/// Enumerate one split of a dataset root and validate it against the files on disk.
pub fn load_frame_dataset(root: &Path, split: Split, clips: ClipParams) -> Result<DatasetManifest> {
    let meta = read_meta(root)?;
    if meta.is_empty() {
        return Err(CrclError::Dataset(format!("{}: meta.csv lists no videos", root.display())));
    }
    let num_scenes = meta.iter().map(|r| r.scene_id).max().unwrap_or(0) + 1;
    let mut by_id = BTreeMap::new();
    for row in meta.iter().filter(|r| r.split == split) {
        if by_id.insert(row.video_id, row).is_some() {
            return Err(CrclError::Dataset(format!("duplicate video {} in {split} split", row.video_id)));
        }
    }
    let mut videos = Vec::with_capacity(by_id.len());
    for (&id, row) in &by_id {
        let dir = root.join(split.dir_name()).join(video_dir_name(id));
        if !dir.is_dir() {
            return Err(CrclError::Dataset(format!("missing video directory {}", dir.display())));
        }
        let n = count_frames(&dir)?;
        if n != row.num_frames {
            return Err(CrclError::Dataset(format!(
                "{}: meta.csv says {} frames, found {n}",
                dir.display(),
                row.num_frames
            )));
        }
        let labels = match split {
            Split::Test => Some(read_labels(&dir, n)?),
            Split::Train => None,
        };
        videos.push(VideoEntry { id, scene_id: row.scene_id, num_frames: n, labels });
    }
    Ok(DatasetManifest { root: root.to_path_buf(), split, num_scenes, videos, clips })
}

/// A window of `clip_len` consecutive frames of one video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    pub video_id: usize,
    pub scene_id: usize,
    /// Index of the first frame in the source video.
    pub start: usize,
    /// Index of the last frame in the source video.
    pub frame_index: usize,
    pub len: usize,
    /// Anomaly flags of the covered frames (test split only).
    pub labels: Option<Vec<u8>>,
}

/// Sliding windows over one video; each clip is keyed by its last frame.
pub fn make_clips(manifest: &DatasetManifest, video_id: usize) -> Result<Vec<Clip>> {
    let v = manifest.video(video_id)?;
    let ClipParams { clip_len, stride } = manifest.clips;
    if v.num_frames < clip_len {
        return Err(CrclError::VideoTooShort { frames: v.num_frames, needed: clip_len });
    }
    Ok((0..=v.num_frames - clip_len)
        .step_by(stride)
        .map(|start| Clip {
            video_id: v.id,
            scene_id: v.scene_id,
            start,
            frame_index: start + clip_len - 1,
            len: clip_len,
            labels: v.labels.as_ref().map(|l| l[start..start + clip_len].to_vec()),
        })
        .collect())
}

/// A split with every frame decoded and preprocessed in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub frame_size: usize,
    frames: BTreeMap<usize, Vec<Frame>>,
}

impl Dataset {
    pub fn load(root: &Path, split: Split, clips: ClipParams, frame_size: usize) -> Result<Self> {
        let manifest = load_frame_dataset(root, split, clips)?;
        let mut frames = BTreeMap::new();
        for v in &manifest.videos {
            let dir = manifest.video_dir(v);
            let fs = (0..v.num_frames)
                .map(|i| preprocess(&RawImage::read_png(&dir.join(frame_file_name(i)))?, frame_size))
                .collect::<Result<Vec<_>>>()?;
            frames.insert(v.id, fs);
        }
        Ok(Self { manifest, frame_size, frames })
    }

    pub fn frames(&self, video_id: usize) -> &[Frame] {
        &self.frames[&video_id]
    }

    /// Every clip of every video, in video order.
    pub fn all_clips(&self) -> Result<Vec<Clip>> {
        let mut out = Vec::new();
        for v in &self.manifest.videos {
            out.extend(make_clips(&self.manifest, v.id)?);
        }
        Ok(out)
    }

    /// Pixels of one clip as `[3, T, S, S]`.
    pub fn clip_tensor(&self, clip: &Clip) -> Tensor {
        let frames = &self.frames(clip.video_id)[clip.start..clip.start + clip.len];
        let s = self.frame_size;
        let plane = s * s;
        let t = clip.len;
        let mut data = vec![0.0; 3 * t * plane];
        for (ti, f) in frames.iter().enumerate() {
            let px = f.pixels().data();
            for c in 0..3 {
                data[(c * t + ti) * plane..(c * t + ti + 1) * plane]
                    .copy_from_slice(&px[c * plane..(c + 1) * plane]);
            }
        }
        Tensor::from_parts(vec![3, t, s, s], data)
    }

    /// Stacked `[B, 3, T, S, S]` batch.
    pub fn batch_tensor(&self, clips: &[&Clip]) -> Tensor {
        let items: Vec<Tensor> = clips.iter().map(|c| self.clip_tensor(c)).collect();
        Tensor::stack(&items).expect("clips of one dataset share a shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_video(root: &Path, split: Split, id: usize, frames: usize) -> PathBuf {
        let dir = root.join(split.dir_name()).join(video_dir_name(id));
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..frames {
            RawImage::rgb(4, 4, vec![(i * 10) as u8; 48]).unwrap().write_png(&dir.join(frame_file_name(i))).unwrap();
        }
        dir
    }

    fn two_video_root(split: Split) -> tempfile::TempDir {
        let tmp = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for id in 0..2 {
            let dir = write_video(tmp.path(), split, id, 10);
            if split == Split::Test {
                write_labels(&dir, &[0; 10]).unwrap();
            }
            rows.push(MetaRow { video_id: id, split, scene_id: id, num_frames: 10 });
        }
        write_meta(tmp.path(), &rows).unwrap();
        tmp
    }

    #[test]
    fn loads_train_root_without_labels() {
        let tmp = two_video_root(Split::Train);
        let m = load_frame_dataset(tmp.path(), Split::Train, ClipParams::default()).unwrap();
        assert_eq!(m.videos.len(), 2);
        assert!(m.videos.iter().all(|v| v.labels.is_none()));
        assert_eq!(m.num_scenes, 2);
    }

    #[test]
    fn missing_labels_on_test_split() {
        let tmp = two_video_root(Split::Test);
        std::fs::remove_file(tmp.path().join("test").join(video_dir_name(1)).join("labels.csv")).unwrap();
        let err = load_frame_dataset(tmp.path(), Split::Test, ClipParams::default()).unwrap_err();
        assert!(matches!(err, CrclError::MissingLabels(_)));
        assert!(err.to_string().contains("missing labels"));
    }

    #[test]
    fn non_contiguous_frames_rejected() {
        let tmp = two_video_root(Split::Train);
        std::fs::remove_file(tmp.path().join("train").join(video_dir_name(0)).join(frame_file_name(4))).unwrap();
        let err = load_frame_dataset(tmp.path(), Split::Train, ClipParams::default()).unwrap_err();
        assert!(err.to_string().contains("non-contiguous"), "{err}");
    }

    #[test]
    fn empty_video_rejected() {
        let tmp = two_video_root(Split::Train);
        let dir = tmp.path().join("train").join(video_dir_name(1));
        for i in 0..10 {
            std::fs::remove_file(dir.join(frame_file_name(i))).unwrap();
        }
        let err = load_frame_dataset(tmp.path(), Split::Train, ClipParams::default()).unwrap_err();
        assert!(err.to_string().contains("empty video"), "{err}");
    }

    fn manifest_with(frames: usize, clip_len: usize) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::from("/nowhere"),
            split: Split::Train,
            num_scenes: 1,
            videos: vec![VideoEntry { id: 3, scene_id: 0, num_frames: frames, labels: None }],
            clips: ClipParams { clip_len, stride: 1 },
        }
    }

    #[test]
    fn sliding_windows_end_on_last_frame() {
        let clips = make_clips(&manifest_with(10, 8), 3).unwrap();
        let ends: Vec<usize> = clips.iter().map(|c| c.frame_index).collect();
        assert_eq!(ends, vec![7, 8, 9]);
        assert_eq!(make_clips(&manifest_with(8, 8), 3).unwrap().len(), 1);
        let err = make_clips(&manifest_with(7, 8), 3).unwrap_err();
        assert!(err.to_string().contains("video too short"));
    }

    #[test]
    fn stride_skips_windows() {
        let mut m = manifest_with(12, 4);
        m.clips.stride = 3;
        let starts: Vec<usize> = make_clips(&m, 3).unwrap().iter().map(|c| c.start).collect();
        assert_eq!(starts, vec![0, 3, 6]);
    }

    #[test]
    fn clip_tensor_is_channels_then_time() {
        let tmp = two_video_root(Split::Train);
        let ds = Dataset::load(tmp.path(), Split::Train, ClipParams { clip_len: 3, stride: 1 }, 4).unwrap();
        let clips = ds.all_clips().unwrap();
        assert_eq!(clips.len(), 16);
        let t = ds.clip_tensor(&clips[1]);
        assert_eq!(t.shape(), &[3, 3, 4, 4]);
        // clip starting at frame 1: pixel value 10 → 10/127.5 - 1
        assert!((t.get(&[2, 0, 1, 1]) - (10.0 / 127.5 - 1.0)).abs() < 1e-12);
        assert!((t.get(&[0, 2, 0, 0]) - (30.0 / 127.5 - 1.0)).abs() < 1e-12);
    }
}
