//! Frame-folder datasets, clip windows, batching, and the synthetic generator.

mod batch;
mod dataset;
mod frame;
mod synth;

pub use batch::{batch_iter, epoch_batches, epoch_windows};
pub use dataset::{
    frame_file_name, load_frame_dataset, make_clips, read_meta, video_dir_name, write_labels, write_meta, Clip,
    ClipParams, Dataset, DatasetManifest, MetaRow, Split, VideoEntry, META_HEADER,
};
pub use frame::{preprocess, Frame, RawImage};
pub use synth::{synth_generate, AnomalyKind, AnomalySpan, SynthDataset};
