//! Train-time augmentation of segment tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{window_tensor, PoseSequence, SegmentTensor, Transcript};
use crate::error::{config, Result};

/// One affine map of the image plane: rotate about the origin, scale, then
/// translate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub angle: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        angle: 0.0,
        tx: 0.0,
        ty: 0.0,
        scale: 1.0,
    };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (
            self.scale * (c * x - s * y) + self.tx,
            self.scale * (s * x + c * y) + self.ty,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FragmentMode {
    Off,
    /// Fragments are drawn in addition to the sliding-window segments.
    #[default]
    Supplement,
    /// Each training segment is swapped for a fragment with its label.
    Replace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub affine: bool,
    pub max_angle_deg: f64,
    pub max_shift: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub fragments: FragmentMode,
    /// Supplementary fragments per epoch as a fraction of the segment count.
    pub fragment_ratio: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            affine: true,
            max_angle_deg: 10.0,
            max_shift: 0.1,
            min_scale: 0.9,
            max_scale: 1.1,
            fragments: FragmentMode::Supplement,
            fragment_ratio: 0.25,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            affine: false,
            fragments: FragmentMode::Off,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return Err(config(format!(
                "scale range [{}, {}] must be positive and ordered",
                self.min_scale, self.max_scale
            )));
        }
        if !(self.max_angle_deg >= 0.0 && self.max_shift >= 0.0) {
            return Err(config("angle and shift limits must be non-negative"));
        }
        if !(0.0..=10.0).contains(&self.fragment_ratio) {
            return Err(config(format!(
                "fragment ratio {} out of range",
                self.fragment_ratio
            )));
        }
        Ok(())
    }

    /// Uniform draw from the configured ranges.
    pub fn sample_affine<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let max_angle = self.max_angle_deg.to_radians();
        let sym = |rng: &mut R, m: f64| {
            if m > 0.0 {
                rng.random_range(-m..=m)
            } else {
                0.0
            }
        };
        let angle = sym(rng, max_angle);
        let tx = sym(rng, self.max_shift);
        let ty = sym(rng, self.max_shift);
        let scale = if self.max_scale > self.min_scale {
            rng.random_range(self.min_scale..=self.max_scale)
        } else {
            self.min_scale
        };
        AffineParams {
            angle,
            tx,
            ty,
            scale,
        }
    }
}

/// Applies `p` to the x and y channels of a `C×T×V×M` tensor, in place.
pub fn affine_in_place(data: &mut crate::numerics::Tensor, p: &AffineParams) {
    let plane: usize = data.shape()[1..].iter().product();
    let d = data.data_mut();
    let (xs, rest) = d.split_at_mut(plane);
    let ys = &mut rest[..plane];
    for (x, y) in xs.iter_mut().zip(ys.iter_mut()) {
        (*x, *y) = p.apply(*x, *y);
    }
}

pub fn random_affine(seg: &SegmentTensor, p: &AffineParams) -> SegmentTensor {
    let mut out = seg.clone();
    affine_in_place(&mut out.data, p);
    out
}

/// A `window`-frame fragment whose end frame is drawn uniformly from the
/// frames that carry `label`. `None` when no frame does.
pub fn random_fragment<R: Rng + ?Sized>(
    seq: &PoseSequence,
    transcript: &Transcript,
    label: usize,
    window: usize,
    rng: &mut R,
) -> Option<SegmentTensor> {
    let last = seq.num_frames() - 1;
    let spans: Vec<(usize, usize)> = transcript
        .entries()
        .iter()
        .filter(|e| e.label == label && e.start <= last)
        .map(|e| (e.start, e.end.min(last)))
        .collect();
    let total: usize = spans.iter().map(|(s, e)| e - s + 1).sum();
    if total == 0 {
        return None;
    }
    let mut pick = rng.random_range(0..total);
    let mut end_frame = 0;
    for (s, e) in spans {
        let len = e - s + 1;
        if pick < len {
            end_frame = s + pick;
            break;
        }
        pick -= len;
    }
    Some(SegmentTensor {
        data: window_tensor(seq, end_frame, window),
        label,
        video_id: seq.meta.video_id.clone(),
        end_frame,
    })
}
