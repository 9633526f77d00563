use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const POSE_HEADER: [&str; 7] = ["video_id", "frame", "tool", "joint", "x", "y", "confidence"];

/// Per-video information the pose table itself does not carry.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoMeta {
    pub video_id: String,
    pub subject_id: String,
    pub frame_rate: f64,
    pub image_width: f64,
    pub image_height: f64,
}

/// Joint detections for every frame, tool instance and joint:
/// `(x, y, confidence)` stored frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub meta: VideoMeta,
    frames: usize,
    tools: usize,
    joints: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl PoseSequence {
    pub fn new(
        meta: VideoMeta,
        frames: usize,
        tools: usize,
        joints: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if frames == 0 || tools == 0 || joints == 0 {
            return Err(invalid(
                "pose sequence needs at least one frame, tool and joint",
            ));
        }
        if data.len() != frames * tools * joints * 3 {
            return Err(invalid(format!(
                "pose data has {} values, expected {}",
                data.len(),
                frames * tools * joints * 3
            )));
        }
        for (i, chunk) in data.chunks(3).enumerate() {
            let (f, t, j) = (i / (tools * joints), (i / joints) % tools, i % joints);
            if !(chunk[0].is_finite() && chunk[1].is_finite()) {
                return Err(invalid(format!(
                    "non-finite coordinate at frame {f}, tool {t}, joint {j}"
                )));
            }
            if !(0.0..=1.0).contains(&chunk[2]) {
                return Err(invalid(format!(
                    "confidence {} out of range at frame {f}, tool {t}, joint {j}",
                    chunk[2]
                )));
            }
        }
        Ok(PoseSequence {
            meta,
            frames,
            tools,
            joints,
            data,
            normalized: false,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn num_tools(&self) -> usize {
        self.tools
    }

    pub fn num_joints(&self) -> usize {
        self.joints
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `[x, y, confidence]` of one joint.
    pub fn joint(&self, frame: usize, tool: usize, joint: usize) -> [f64; 3] {
        let o = ((frame * self.tools + tool) * self.joints + joint) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Values of one frame, tool-major then joint then channel.
    pub fn frame(&self, frame: usize) -> &[f64] {
        let len = self.tools * self.joints * 3;
        &self.data[frame * len..(frame + 1) * len]
    }

    /// Maps pixel coordinates to `[-1, 1]` by image size. Applying it to an
    /// already-normalized sequence is an error.
    pub fn normalize_coords(mut self) -> Result<Self> {
        if self.normalized {
            return Err(invalid(format!(
                "{} is already normalized",
                self.meta.video_id
            )));
        }
        let (w, h) = (self.meta.image_width, self.meta.image_height);
        if !(w > 0.0 && h > 0.0) {
            return Err(invalid(format!("image size {w}×{h} must be positive")));
        }
        for chunk in self.data.chunks_mut(3) {
            chunk[0] = 2.0 * chunk[0] / w - 1.0;
            chunk[1] = 2.0 * chunk[1] / h - 1.0;
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut out = std::io::BufWriter::new(file);
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        writeln!(out, "{}", POSE_HEADER.join(",")).map_err(io)?;
        for f in 0..self.frames {
            for t in 0..self.tools {
                for j in 0..self.joints {
                    let [x, y, c] = self.joint(f, t, j);
                    writeln!(out, "{},{f},{t},{j},{x},{y},{c}", self.meta.video_id).map_err(io)?;
                }
            }
        }
        out.flush().map_err(io)
    }
}

/// Reads a pose table. Every `(frame, tool, joint)` cell must be present; a
/// row whose `x` and `y` are both empty marks a missed detection and is
/// filled from the nearest earlier detection of that joint (the next one at
/// the start of the video, the image center if never seen) with confidence 0.
pub fn load_pose_file(path: &Path, meta: VideoMeta) -> Result<PoseSequence> {
    let fail = |reason: String| Error::format(path, reason);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| fail(e.to_string()))?;
    let header = reader.headers().map_err(|e| fail(e.to_string()))?.clone();
    if header.iter().map(str::trim).ne(POSE_HEADER.iter().copied()) {
        return Err(fail(format!("header must be {}", POSE_HEADER.join(","))));
    }
    struct Row {
        frame: usize,
        tool: usize,
        joint: usize,
        value: Option<[f64; 3]>,
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| fail(format!("line {line}: {e}")))?;
        if rec.len() != 7 {
            return Err(fail(format!(
                "line {line}: expected 7 fields, got {}",
                rec.len()
            )));
        }
        if rec[0].trim() != meta.video_id {
            return Err(fail(format!(
                "line {line}: video id {} does not match {}",
                rec[0].trim(),
                meta.video_id
            )));
        }
        let index = |k: usize, name: &str| {
            rec[k]
                .trim()
                .parse::<usize>()
                .map_err(|_| fail(format!("line {line}: bad {name} `{}`", &rec[k])))
        };
        let (frame, tool, joint) = (index(1, "frame")?, index(2, "tool")?, index(3, "joint")?);
        let (xs, ys) = (rec[4].trim(), rec[5].trim());
        let value = if xs.is_empty() && ys.is_empty() {
            None
        } else {
            let num = |s: &str, name: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        fail(format!("line {line}: {name} `{s}` is not a finite number"))
                    })
            };
            let (x, y, c) = (
                num(xs, "x")?,
                num(ys, "y")?,
                num(rec[6].trim(), "confidence")?,
            );
            if !(0.0..=1.0).contains(&c) {
                return Err(fail(format!(
                    "line {line}: confidence {c} out of range [0, 1]"
                )));
            }
            Some([x, y, c])
        };
        rows.push(Row {
            frame,
            tool,
            joint,
            value,
        });
    }
    if rows.is_empty() {
        return Err(fail("no pose rows".into()));
    }
    let frames = rows.iter().map(|r| r.frame).max().unwrap() + 1;
    let tools = rows.iter().map(|r| r.tool).max().unwrap() + 1;
    let joints = rows.iter().map(|r| r.joint).max().unwrap() + 1;
    let cell = |f: usize, t: usize, j: usize| (f * tools + t) * joints + j;
    let mut grid: Vec<Option<Option<[f64; 3]>>> = vec![None; frames * tools * joints];
    for r in rows {
        let slot = &mut grid[cell(r.frame, r.tool, r.joint)];
        if slot.is_some() {
            return Err(fail(format!(
                "duplicate row for frame {}, tool {}, joint {}",
                r.frame, r.tool, r.joint
            )));
        }
        *slot = Some(r.value);
    }
    if let Some(missing) = grid.iter().position(Option::is_none) {
        let (f, t, j) = (
            missing / (tools * joints),
            (missing / joints) % tools,
            missing % joints,
        );
        return Err(fail(format!(
            "missing row for frame {f}, tool {t}, joint {j}"
        )));
    }
    let mut data = vec![0.0; frames * tools * joints * 3];
    for t in 0..tools {
        for j in 0..joints {
            let detections: Vec<Option<[f64; 3]>> =
                (0..frames).map(|f| grid[cell(f, t, j)].unwrap()).collect();
            let fallback = detections
                .iter()
                .flatten()
                .next()
                .map(|d| [d[0], d[1]])
                .unwrap_or([meta.image_width / 2.0, meta.image_height / 2.0]);
            let mut last = fallback;
            for (f, d) in detections.iter().enumerate() {
                let o = cell(f, t, j) * 3;
                match d {
                    Some(v) => {
                        data[o..o + 3].copy_from_slice(v);
                        last = [v[0], v[1]];
                    }
                    None => data[o..o + 3].copy_from_slice(&[last[0], last[1], 0.0]),
                }
            }
        }
    }
    PoseSequence::new(meta, frames, tools, joints, data).map_err(|e| fail(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> VideoMeta {
        VideoMeta {
            video_id: "vid".into(),
            subject_id: "S".into(),
            frame_rate: 30.0,
            image_width: 640.0,
            image_height: 480.0,
        }
    }

    fn table(frames: usize, skip: Option<(usize, usize)>) -> String {
        let mut s = POSE_HEADER.join(",") + "\n";
        for f in 0..frames {
            for j in 0..5 {
                if skip == Some((f, j)) {
                    continue;
                }
                s += &format!("vid,{f},0,{j},{},{},0.9\n", 10 * f + j, 20 + j);
            }
        }
        s
    }

    fn load_str(text: &str) -> Result<PoseSequence> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        std::fs::write(&p, text).unwrap();
        load_pose_file(&p, meta())
    }

    #[test]
    fn loads_three_frames() {
        let seq = load_str(&table(3, None)).unwrap();
        assert_eq!(seq.num_frames(), 3);
        assert_eq!(seq.num_joints(), 5);
        assert_eq!(seq.num_tools(), 1);
        assert_eq!(seq.joint(2, 0, 4), [24.0, 24.0, 0.9]);
    }

    #[test]
    fn unsorted_rows_are_sorted() {
        let t = table(2, None);
        let mut lines: Vec<&str> = t.lines().collect();
        lines[1..].reverse();
        let seq = load_str(&(lines.join("\n") + "\n")).unwrap();
        assert_eq!(seq, load_str(&t).unwrap());
    }

    #[test]
    fn missing_cell_names_location() {
        let err = load_str(&table(3, Some((1, 4)))).unwrap_err().to_string();
        assert!(err.contains("frame 1") && err.contains("joint 4"), "{err}");
    }

    #[test]
    fn rejects_bad_confidence_and_non_finite() {
        let bad = table(2, None).replace("vid,1,0,2,12,22,0.9", "vid,1,0,2,12,22,1.2");
        assert!(load_str(&bad)
            .unwrap_err()
            .to_string()
            .contains("out of range"));
        let nan = table(2, None).replace("vid,1,0,2,12,22,0.9", "vid,1,0,2,NaN,22,0.9");
        assert!(load_str(&nan).is_err());
        let inf = table(2, None).replace("vid,1,0,2,12,22,0.9", "vid,1,0,2,inf,22,0.9");
        assert!(load_str(&inf).is_err());
    }

    #[test]
    fn missed_detections_copy_last_pose_with_zero_confidence() {
        let t = table(3, None)
            .replace("vid,1,0,3,13,23,0.9", "vid,1,0,3,,,")
            .replace("vid,0,0,0,0,20,0.9", "vid,0,0,0,,,0.5");
        let seq = load_str(&t).unwrap();
        assert_eq!(seq.joint(1, 0, 3), [3.0, 23.0, 0.0]);
        // Nothing earlier: take the first later detection.
        assert_eq!(seq.joint(0, 0, 0), [10.0, 20.0, 0.0]);
    }

    #[test]
    fn normalization_maps_image_to_unit_box() {
        let mut data = Vec::new();
        for (x, y) in [(320.0, 240.0), (0.0, 0.0), (640.0, 480.0)] {
            data.extend([x, y, 0.7]);
        }
        let seq = PoseSequence::new(meta(), 1, 1, 3, data).unwrap();
        let n = seq.normalize_coords().unwrap();
        assert_eq!(n.joint(0, 0, 0), [0.0, 0.0, 0.7]);
        assert_eq!(n.joint(0, 0, 1), [-1.0, -1.0, 0.7]);
        assert_eq!(n.joint(0, 0, 2), [1.0, 1.0, 0.7]);
        assert!(n.normalize_coords().is_err());

        let mut zero = meta();
        zero.image_width = 0.0;
        let seq = PoseSequence::new(zero, 1, 1, 1, vec![1.0, 1.0, 1.0]).unwrap();
        assert!(seq.normalize_coords().is_err());
    }
}
