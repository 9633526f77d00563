use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pose::{load_pose_file, PoseSequence, VideoMeta};
use super::segment::window_tensor;
use super::transcript::{load_transcript, GestureVocab, IndexBase, Transcript};
use crate::error::{config, Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";
const MANIFEST_FORMAT: &str = "stgcn-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub video_id: String,
    pub subject_id: String,
    pub task: String,
    /// Pose table, relative to the manifest's directory.
    pub pose: PathBuf,
    /// Gesture transcript, relative to the manifest's directory.
    pub transcript: PathBuf,
    pub width: f64,
    pub height: f64,
    pub fps: f64,
}

/// Index of a dataset directory: gesture vocabulary and one entry per video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub task: String,
    pub gestures: GestureVocab,
    #[serde(default)]
    pub index_base: IndexBase,
    pub videos: Vec<VideoEntry>,
}

impl Manifest {
    pub fn new(
        task: impl Into<String>,
        gestures: GestureVocab,
        index_base: IndexBase,
        videos: Vec<VideoEntry>,
    ) -> Result<Self> {
        let m = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            task: task.into(),
            gestures,
            index_base,
            videos,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT || self.version != MANIFEST_VERSION {
            return Err(config(format!(
                "unsupported manifest format {} v{} (expected {MANIFEST_FORMAT} v{MANIFEST_VERSION})",
                self.format, self.version
            )));
        }
        GestureVocab::new(self.gestures.labels().to_vec())?;
        let mut ids = HashSet::new();
        for v in &self.videos {
            if !ids.insert(v.video_id.as_str()) {
                return Err(config(format!("video {} listed twice", v.video_id)));
            }
        }
        if self.videos.is_empty() {
            return Err(config("manifest lists no videos"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Reads `path`, or `path/manifest.toml` when `path` is a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = manifest_path(path);
        let text = std::fs::read_to_string(&file)
            .map_err(|e| Error::io(format!("reading {}", file.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| Error::format(&file, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Subjects in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> =
            self.videos.iter().map(|v| v.subject_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// One leave-one-user-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub subject: String,
    pub test_videos: Vec<String>,
    pub train_videos: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

pub const EXPECTED_SUBJECTS: usize = 8;

/// One fold per subject, in sorted subject order. Any subject count other
/// than eight is accepted with a warning.
pub fn build_louo_folds(manifest: &Manifest) -> Result<FoldPlan> {
    let subjects = manifest.subjects();
    if subjects.len() < 2 {
        return Err(config(format!(
            "leave-one-user-out needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    if subjects.len() != EXPECTED_SUBJECTS {
        log::warn!(
            "manifest has {} subjects instead of {EXPECTED_SUBJECTS}; building {} folds",
            subjects.len(),
            subjects.len()
        );
    }
    let mut by_subject: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for v in &manifest.videos {
        by_subject
            .entry(v.subject_id.as_str())
            .or_default()
            .push(v.video_id.clone());
    }
    let folds = subjects
        .iter()
        .map(|s| Fold {
            subject: s.clone(),
            test_videos: by_subject[s.as_str()].clone(),
            train_videos: manifest
                .videos
                .iter()
                .filter(|v| &v.subject_id != s)
                .map(|v| v.video_id.clone())
                .collect(),
        })
        .collect();
    Ok(FoldPlan { folds })
}

impl FoldPlan {
    pub fn fold(&self, subject: &str) -> Option<&Fold> {
        self.folds.iter().find(|f| f.subject == subject)
    }

    /// Every subject held out once; in each fold train and test are
    /// disjoint and together cover `all_videos`.
    pub fn check(&self, all_videos: &[String]) -> Result<()> {
        let all: HashSet<&str> = all_videos.iter().map(String::as_str).collect();
        let mut subjects = HashSet::new();
        let mut tested = HashSet::new();
        for f in &self.folds {
            if !subjects.insert(f.subject.as_str()) {
                return Err(config(format!("subject {} held out twice", f.subject)));
            }
            let test: HashSet<&str> = f.test_videos.iter().map(String::as_str).collect();
            let train: HashSet<&str> = f.train_videos.iter().map(String::as_str).collect();
            if !test.is_disjoint(&train) {
                return Err(config(format!(
                    "fold {} shares videos between train and test",
                    f.subject
                )));
            }
            if test.union(&train).copied().collect::<HashSet<_>>() != all {
                return Err(config(format!(
                    "fold {} does not cover the dataset",
                    f.subject
                )));
            }
            for v in &f.test_videos {
                if !tested.insert(v.as_str()) {
                    return Err(config(format!("video {v} tested in more than one fold")));
                }
            }
        }
        if tested != all {
            return Err(config("test sets do not cover every video"));
        }
        Ok(())
    }
}

/// A loaded, normalized video with its transcript.
#[derive(Clone, Debug)]
pub struct Video {
    pub seq: PoseSequence,
    pub transcript: Transcript,
}

impl Video {
    pub fn id(&self) -> &str {
        &self.seq.meta.video_id
    }

    pub fn subject(&self) -> &str {
        &self.seq.meta.subject_id
    }
}

/// Reference to one window of a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub video: usize,
    pub end_frame: usize,
    pub label: usize,
}

/// Videos of a manifest held in memory; windows are cut on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub videos: Vec<Video>,
    pub window: usize,
    pub step: usize,
}

impl Dataset {
    /// Loads every video of the manifest, checking joint and tool counts.
    pub fn load(
        path: &Path,
        joints: usize,
        tools: usize,
        window: usize,
        step: usize,
    ) -> Result<Self> {
        let manifest = Manifest::load(path)?;
        let root = manifest_path(path)
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for entry in &manifest.videos {
            let meta = VideoMeta {
                video_id: entry.video_id.clone(),
                subject_id: entry.subject_id.clone(),
                frame_rate: entry.fps,
                image_width: entry.width,
                image_height: entry.height,
            };
            let pose_path = root.join(&entry.pose);
            let seq = load_pose_file(&pose_path, meta)?;
            if seq.num_joints() != joints || seq.num_tools() != tools {
                return Err(Error::format(
                    &pose_path,
                    format!(
                        "has {} joints × {} tools, configuration expects {joints} × {tools}",
                        seq.num_joints(),
                        seq.num_tools()
                    ),
                ));
            }
            let transcript = load_transcript(
                &root.join(&entry.transcript),
                &entry.video_id,
                &manifest.gestures,
                manifest.index_base,
            )?;
            videos.push(Video {
                seq: seq.normalize_coords()?,
                transcript,
            });
        }
        Ok(Dataset {
            manifest,
            videos,
            window,
            step,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.gestures.len()
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.id().to_string()).collect()
    }

    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.id() == id)
    }

    /// Sliding-window samples of the listed videos, in the given order.
    pub fn samples(&self, video_ids: &[String]) -> Result<Vec<SampleRef>> {
        let mut out = Vec::new();
        for id in video_ids {
            let vi = self
                .video_index(id)
                .ok_or_else(|| config(format!("video {id} is not in the dataset")))?;
            let v = &self.videos[vi];
            out.extend(
                super::segment::segment_ends(&v.transcript, v.seq.num_frames(), self.step)
                    .into_iter()
                    .map(|(end_frame, label)| SampleRef {
                        video: vi,
                        end_frame,
                        label,
                    }),
            );
        }
        Ok(out)
    }

    pub fn all_samples(&self) -> Vec<SampleRef> {
        self.samples(&self.video_ids()).expect("own ids")
    }

    pub fn window_of(&self, s: &SampleRef) -> Tensor {
        window_tensor(&self.videos[s.video].seq, s.end_frame, self.window)
    }
}
