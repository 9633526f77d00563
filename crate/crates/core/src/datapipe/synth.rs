//! Synthetic grasper-pose datasets written in the on-disk formats.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{Manifest, VideoEntry, MANIFEST_FILE};
use super::pose::POSE_HEADER;
use super::transcript::{GestureVocab, IndexBase, Transcript, TranscriptEntry};
use crate::error::{config, Error, Result};
use crate::numerics::rng::derived;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub classes: usize,
    pub subjects: usize,
    pub trials: usize,
    pub seed: u64,
    pub tools: usize,
    /// Gestures performed by each subject, split as evenly as possible over
    /// its trials. With the default (one per class) every subject performs
    /// every class once.
    pub gestures_per_subject: usize,
    /// Gesture duration range in frames, inclusive.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Untranscribed frames before the first gesture, at most.
    pub max_lead: usize,
    /// Untranscribed rest frames between consecutive gestures, inclusive range.
    pub gap_frames: (usize, usize),
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Probability that a joint detection is missing in a frame.
    pub miss_rate: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            classes: 10,
            subjects: 8,
            trials: 3,
            seed: 0,
            tools: 2,
            gestures_per_subject: 10,
            min_frames: 45,
            max_frames: 75,
            max_lead: 15,
            gap_frames: (40, 80),
            noise: 1.5,
            miss_rate: 0.002,
        }
    }
}

pub const IMAGE_WIDTH: f64 = 640.0;
pub const IMAGE_HEIGHT: f64 = 480.0;
pub const FRAME_RATE: f64 = 30.0;
const TASK: &str = "Suturing";
const LINKS: [f64; 3] = [60.0, 40.0, 20.0];

/// Motion pattern of one gesture class.
#[derive(Clone, Copy, Debug)]
struct ClassMotion {
    shaft_angle: f64,
    swing: f64,
    swing_hz: f64,
    phase: f64,
    bend: f64,
    opening: f64,
    open_swing: f64,
    open_hz: f64,
    reach: f64,
}

impl ClassMotion {
    fn sample(class: usize, classes: usize, rng: &mut impl Rng) -> Self {
        // Each cue visits the classes in a different order, so no two
        // classes agree on all of them.
        let spread = |mult: usize| ((class * mult % classes) as f64 + 0.5) / classes as f64;
        ClassMotion {
            shaft_angle: -0.8 + 1.6 * spread(1) + rng.random_range(-0.05..0.05),
            swing: rng.random_range(0.1..0.3),
            swing_hz: 0.3 + 2.0 * spread(7),
            phase: rng.random_range(0.0..2.0 * PI),
            bend: -1.2 + 2.4 * spread(3) + rng.random_range(-0.05..0.05),
            opening: 0.1 + 0.9 * spread(9) + rng.random_range(-0.03..0.03),
            open_swing: rng.random_range(0.0..0.1),
            open_hz: rng.random_range(0.5..2.5),
            reach: rng.random_range(-40.0..40.0),
        }
    }
}

/// Motion outside any gesture: a still, half-open grasper.
const REST: ClassMotion = ClassMotion {
    shaft_angle: 0.0,
    swing: 0.02,
    swing_hz: 0.2,
    phase: 0.0,
    bend: 0.0,
    opening: 0.3,
    open_swing: 0.0,
    open_hz: 0.0,
    reach: 0.0,
};

/// Per-subject style: placement, size and angle bias.
#[derive(Clone, Copy, Debug)]
struct Style {
    dx: f64,
    dy: f64,
    scale: f64,
    tilt: f64,
}

fn subject_name(s: usize) -> String {
    // Subjects B, C, D, ... then numbered beyond Z.
    if s < 25 {
        ((b'B' + s as u8) as char).to_string()
    } else {
        format!("X{s}")
    }
}

/// Joint positions of one tool at time `t` seconds. `mirror` flips the
/// tool to the other side of the image.
fn tool_pose(m: &ClassMotion, style: &Style, t: f64, tool: usize, mirror: bool) -> [[f64; 2]; 5] {
    let side = if mirror { -1.0 } else { 1.0 };
    let base_x = IMAGE_WIDTH / 2.0
        + side * (-130.0 + 20.0 * (2.0 * PI * 0.1 * t + tool as f64).sin())
        + style.dx;
    let base_y = IMAGE_HEIGHT * 0.75 + 10.0 * (2.0 * PI * 0.07 * t).cos() + style.dy;
    let theta = m.shaft_angle + m.swing * (2.0 * PI * m.swing_hz * t + m.phase).sin() + style.tilt;
    let open = m.opening + m.open_swing * (2.0 * PI * m.open_hz * t).sin();
    // Angles are measured from straight up, positive toward the image center.
    let dir = |a: f64| [side * a.sin(), -a.cos()];
    let l: Vec<f64> = LINKS.iter().map(|v| v * style.scale).collect();
    let arm = [base_x + side * m.reach * 0.3, base_y];
    let d0 = dir(theta);
    let wrist = [arm[0] + l[0] * d0[0], arm[1] + l[0] * d0[1]];
    let d1 = dir(theta + m.bend);
    let shaft = [wrist[0] + l[1] * d1[0], wrist[1] + l[1] * d1[1]];
    let da = dir(theta + m.bend - open);
    let db = dir(theta + m.bend + open);
    let ea = [shaft[0] + l[2] * da[0], shaft[1] + l[2] * da[1]];
    let eb = [shaft[0] + l[2] * db[0], shaft[1] + l[2] * db[1]];
    [arm, wrist, shaft, ea, eb]
}

/// Writes `poses/`, `transcriptions/` and `manifest.toml` under `dir` and
/// returns the manifest.
pub fn synth_dataset(dir: &Path, opts: &SynthOptions) -> Result<Manifest> {
    if opts.classes == 0
        || opts.subjects == 0
        || opts.trials == 0
        || opts.tools == 0
        || opts.gestures_per_subject < opts.trials
    {
        return Err(config(
            "synthetic dataset sizes must be positive, with at least one gesture per trial",
        ));
    }
    if opts.min_frames == 0 || opts.min_frames > opts.max_frames {
        return Err(config("gesture duration range is empty"));
    }
    if opts.gap_frames.0 > opts.gap_frames.1 {
        return Err(config("gap range is empty"));
    }
    let vocab = GestureVocab::first(opts.classes)?;
    let mut class_rng = derived(opts.seed, &[0]);
    let motions: Vec<Vec<ClassMotion>> = (0..opts.classes)
        .map(|c| {
            (0..opts.tools)
                .map(|_| ClassMotion::sample(c, opts.classes, &mut class_rng))
                .collect()
        })
        .collect();

    let poses_dir = dir.join("poses");
    let trans_dir = dir.join("transcriptions");
    for d in [&poses_dir, &trans_dir] {
        std::fs::create_dir_all(d)
            .map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }

    let mut videos = Vec::new();
    for s in 0..opts.subjects {
        let mut srng = derived(opts.seed, &[1 + s as u64]);
        let style = Style {
            dx: srng.random_range(-25.0..25.0),
            dy: srng.random_range(-20.0..20.0),
            scale: srng.random_range(0.9..1.1),
            tilt: srng.random_range(-0.08..0.08),
        };
        let name = subject_name(s);
        // The subject's gestures cycle c, c+1, ... through the classes and
        // each trial continues where the previous one stopped.
        let mut class = (s * (opts.gestures_per_subject + 1)) % opts.classes;
        for trial in 0..opts.trials {
            let count = opts.gestures_per_subject / opts.trials
                + usize::from(trial < opts.gestures_per_subject % opts.trials);
            let video_id = format!("{TASK}_{name}{:03}", trial + 1);
            let mut rng = derived(opts.seed, &[1 + s as u64, 1 + trial as u64]);
            let mut entries = Vec::new();
            let mut frame = rng.random_range(0..=opts.max_lead);
            for _ in 0..count {
                let len = rng.random_range(opts.min_frames..=opts.max_frames);
                entries.push(TranscriptEntry {
                    start: frame,
                    end: frame + len - 1,
                    label: class,
                });
                frame += len + rng.random_range(opts.gap_frames.0..=opts.gap_frames.1);
                class = (class + 1) % opts.classes;
            }
            let frames = frame;
            let transcript = Transcript::new(video_id.clone(), entries)?;
            let pose_rel = PathBuf::from("poses").join(format!("{video_id}.csv"));
            let trans_rel = PathBuf::from("transcriptions").join(format!("{video_id}.txt"));
            write_video(
                &dir.join(&pose_rel),
                &video_id,
                &transcript,
                frames,
                &motions,
                &style,
                opts,
                &mut rng,
            )?;
            transcript.write(&dir.join(&trans_rel), &vocab)?;
            videos.push(VideoEntry {
                video_id,
                subject_id: format!("Subj{name}"),
                task: TASK.into(),
                pose: pose_rel,
                transcript: trans_rel,
                width: IMAGE_WIDTH,
                height: IMAGE_HEIGHT,
                fps: FRAME_RATE,
            });
        }
    }
    let manifest = Manifest::new(TASK, vocab, IndexBase::Zero, videos)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[allow(clippy::too_many_arguments)]
fn write_video(
    path: &Path,
    video_id: &str,
    transcript: &Transcript,
    frames: usize,
    motions: &[Vec<ClassMotion>],
    style: &Style,
    opts: &SynthOptions,
    rng: &mut impl Rng,
) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    let noise = Normal::new(0.0, opts.noise.max(0.0)).map_err(|e| config(e.to_string()))?;
    writeln!(out, "{}", POSE_HEADER.join(",")).map_err(io)?;
    for f in 0..frames {
        let t = f as f64 / FRAME_RATE;
        for tool in 0..opts.tools {
            let motion = transcript.label_at(f).map_or(&REST, |l| &motions[l][tool]);
            let pose = tool_pose(motion, style, t, tool, tool % 2 == 1);
            for (j, p) in pose.iter().enumerate() {
                let x = p[0] + noise.sample(rng);
                let y = p[1] + noise.sample(rng);
                let c: f64 = rng.random_range(0.8..1.0);
                if rng.random_bool(opts.miss_rate.clamp(0.0, 1.0)) {
                    writeln!(out, "{video_id},{f},{tool},{j},,,0").map_err(io)?;
                } else {
                    writeln!(out, "{video_id},{f},{tool},{j},{x:.3},{y:.3},{c:.3}").map_err(io)?;
                }
            }
        }
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::manifest::Dataset;

    fn small() -> SynthOptions {
        SynthOptions {
            subjects: 3,
            trials: 2,
            seed: 5,
            ..SynthOptions::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = synth_dataset(a.path(), &small()).unwrap();
        synth_dataset(b.path(), &small()).unwrap();
        for v in &m.videos {
            for rel in [&v.pose, &v.transcript] {
                assert_eq!(
                    std::fs::read(a.path().join(rel)).unwrap(),
                    std::fs::read(b.path().join(rel)).unwrap()
                );
            }
        }
        assert_eq!(
            std::fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn generated_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(dir.path(), &small()).unwrap();
        assert_eq!(m.videos.len(), 6);
        assert_eq!(m.subjects(), vec!["SubjB", "SubjC", "SubjD"]);
        let ds = Dataset::load(dir.path(), 5, 2, 90, 3).unwrap();
        for v in &ds.videos {
            assert_eq!(
                v.transcript.entries().len(),
                small().gestures_per_subject / 2
            );
            assert!(v.seq.is_normalized());
        }
        assert!(!ds.all_samples().is_empty());
    }

    #[test]
    fn every_subject_performs_every_class_between_rests() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions::default();
        let m = synth_dataset(dir.path(), &opts).unwrap();
        let ds = Dataset::load(dir.path(), 5, 2, 90, 3).unwrap();
        let mut per_subject = std::collections::BTreeMap::<String, Vec<usize>>::new();
        for v in &ds.videos {
            let subject = &m
                .videos
                .iter()
                .find(|e| e.video_id == v.id())
                .unwrap()
                .subject_id;
            let counts = per_subject
                .entry(subject.clone())
                .or_insert_with(|| vec![0; opts.classes]);
            let e = v.transcript.entries();
            for pair in e.windows(2) {
                let gap = pair[1].start - pair[0].end - 1;
                assert!(
                    (opts.gap_frames.0..=opts.gap_frames.1).contains(&gap),
                    "gap {gap}"
                );
                assert_eq!(pair[1].label, (pair[0].label + 1) % opts.classes);
            }
            for x in e {
                counts[x.label] += 1;
            }
        }
        assert_eq!(per_subject.len(), opts.subjects);
        for (subject, counts) in per_subject {
            assert!(counts.iter().all(|&c| c == 1), "{subject}: {counts:?}");
        }
    }

    /// Oracle: nearest class centroid over raw window tensors, trained on
    /// some subjects and tested on another.
    #[test]
    fn nearest_centroid_beats_chance() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            subjects: 4,
            trials: 3,
            seed: 11,
            ..SynthOptions::default()
        };
        synth_dataset(dir.path(), &opts).unwrap();
        let ds = Dataset::load(dir.path(), 5, 2, 90, 3).unwrap();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for v in ds.video_ids() {
            if v.contains("_E") {
                test.push(v);
            } else {
                train.push(v);
            }
        }
        let k = ds.num_classes();
        let train_s = ds.samples(&train).unwrap();
        let dim = ds.window_of(&train_s[0]).len();
        let mut centroids = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for s in &train_s {
            for (c, x) in centroids[s.label].iter_mut().zip(ds.window_of(s).data()) {
                *c += x;
            }
            counts[s.label] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
        }
        let test_s = ds.samples(&test).unwrap();
        let correct = test_s
            .iter()
            .filter(|s| {
                let x = ds.window_of(s);
                let dist = |c: &Vec<f64>| {
                    c.iter()
                        .zip(x.data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                };
                let best = (0..k)
                    .filter(|&c| counts[c] > 0)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == s.label
            })
            .count();
        let acc = correct as f64 / test_s.len() as f64;
        assert!(acc > 0.1, "nearest-centroid accuracy {acc}");
    }
}
