use super::pose::PoseSequence;
use super::transcript::Transcript;
use crate::error::{invalid, Result};
use crate::numerics::Tensor;

/// Input channels per joint: x, y, confidence.
pub const CHANNELS: usize = 3;
pub const DEFAULT_WINDOW: usize = 90;
pub const DEFAULT_STEP: usize = 3;

/// One classifier input: a `C×T×V×M` window labelled with the gesture at its
/// last frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentTensor {
    pub data: Tensor,
    pub label: usize,
    pub video_id: String,
    pub end_frame: usize,
}

/// Window end frames `0, step, 2·step, …` inside the video that a
/// transcript entry covers, with their labels.
pub fn segment_ends(
    transcript: &Transcript,
    num_frames: usize,
    step: usize,
) -> Vec<(usize, usize)> {
    (0..num_frames)
        .step_by(step.max(1))
        .filter_map(|end| transcript.label_at(end).map(|label| (end, label)))
        .collect()
}

/// The `window` frames ending at `end_frame`; positions before the start of
/// the video repeat frame 0.
pub fn window_tensor(seq: &PoseSequence, end_frame: usize, window: usize) -> Tensor {
    let (v, m) = (seq.num_joints(), seq.num_tools());
    let mut data = vec![0.0; CHANNELS * window * v * m];
    for slot in 0..window {
        let frame = (end_frame + slot + 1).saturating_sub(window);
        let src = seq.frame(frame);
        for tool in 0..m {
            for joint in 0..v {
                let s = (tool * v + joint) * CHANNELS;
                for c in 0..CHANNELS {
                    data[((c * window + slot) * v + joint) * m + tool] = src[s + c];
                }
            }
        }
    }
    Tensor::from_parts(vec![CHANNELS, window, v, m], data)
}

/// Sliding-window segmentation of a normalized sequence.
pub fn segment(
    seq: &PoseSequence,
    transcript: &Transcript,
    window: usize,
    step: usize,
) -> Result<Vec<SegmentTensor>> {
    if !seq.is_normalized() {
        return Err(invalid(format!(
            "{} must be normalized before segmentation",
            seq.meta.video_id
        )));
    }
    if window == 0 || step == 0 {
        return Err(invalid("window and step must be positive"));
    }
    Ok(segment_ends(transcript, seq.num_frames(), step)
        .into_iter()
        .map(|(end_frame, label)| SegmentTensor {
            data: window_tensor(seq, end_frame, window),
            label,
            video_id: seq.meta.video_id.clone(),
            end_frame,
        })
        .collect())
}
