//! Pose and transcript ingestion, windowing, fold plans and synthetic data.

pub mod manifest;
pub mod pose;
pub mod segment;
pub mod synth;
pub mod transcript;

pub use manifest::{
    build_louo_folds, Dataset, Fold, FoldPlan, Manifest, SampleRef, Video, VideoEntry,
};
pub use pose::{load_pose_file, PoseSequence, VideoMeta};
pub use segment::{
    segment, segment_ends, window_tensor, SegmentTensor, CHANNELS, DEFAULT_STEP, DEFAULT_WINDOW,
};
pub use synth::{synth_dataset, SynthOptions};
pub use transcript::{load_transcript, GestureVocab, IndexBase, Transcript, TranscriptEntry};
