//! Value types shared by every stage of the loop: video metadata, boxes,
//! class distributions, per-frame detections and ground truth.
//!
//! Everything here is immutable after construction. Boxes are center-based
//! (`cx, cy, bw, bh` in pixels); corner-based inputs are converted at the
//! I/O boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the probability sum accepted at ingestion, before renormalizing.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Default minimum max-class probability for a detection to count as an instance.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub class_names: Vec<String>,
}

impl VideoMeta {
    pub fn new(width: usize, height: usize, num_frames: usize, class_names: Vec<String>) -> Result<Self> {
        let meta = VideoMeta {
            width,
            height,
            num_frames,
            class_names,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::InvalidMeta(format!(
                "frame size {}x{} must be at least 1x1",
                self.width, self.height
            )));
        }
        if self.num_frames < 2 {
            return Err(Error::InvalidMeta(format!(
                "video needs at least 2 frames, got {}",
                self.num_frames
            )));
        }
        if self.class_names.len() < 2 {
            return Err(Error::InvalidMeta(format!(
                "need at least 2 classes, got {}",
                self.class_names.len()
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn check_frame(&self, index: usize) -> Result<()> {
        if index >= self.num_frames {
            return Err(Error::FrameOutOfRange {
                index,
                frames: self.num_frames,
            });
        }
        Ok(())
    }
}

/// Axis-aligned box, center-based, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub bw: f64,
    pub bh: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, bw: f64, bh: f64) -> Result<Self> {
        let b = BBox { cx, cy, bw, bh };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "center ({}, {}) is not finite",
                self.cx, self.cy
            )));
        }
        if !(self.bw.is_finite() && self.bh.is_finite()) || self.bw < 0.0 || self.bh < 0.0 {
            return Err(Error::InvalidBox(format!(
                "size {}x{} must be finite and non-negative",
                self.bw, self.bh
            )));
        }
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.bw / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.bw / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.bh / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.bh / 2.0
    }

    pub fn area(&self) -> f64 {
        self.bw * self.bh
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.cx, b.cy, b.bw, b.bh]
    }
}

/// Probability vector over the k classes of a video.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    /// Validates and renormalizes raw probabilities.
    ///
    /// Entries must lie in `[0, 1]` and sum to 1 within
    /// [`DISTRIBUTION_TOLERANCE`]; the stored vector is rescaled to sum to 1.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 entries, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::InvalidDistribution(format!("entry {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(ClassDistribution(probs.into_iter().map(|p| p / sum).collect()))
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        assert!(class < k, "class {class} out of range for {k} classes");
        let mut probs = vec![0.0; k];
        probs[class] = 1.0;
        ClassDistribution(probs)
    }

    pub fn uniform(k: usize) -> Self {
        ClassDistribution(vec![1.0 / k as f64; k])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.0[self.argmax()]
    }
}

impl<'de> Deserialize<'de> for ClassDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<f64>::deserialize(d)?;
        ClassDistribution::new(raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub probs: ClassDistribution,
}

impl Detection {
    pub fn class(&self) -> usize {
        self.probs.argmax()
    }

    pub fn confidence(&self) -> f64 {
        self.probs.max_prob()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
}

impl FrameDetections {
    pub fn empty(frame_index: usize) -> Self {
        FrameDetections {
            frame_index,
            detections: Vec::new(),
        }
    }

    /// Checks every distribution has exactly `k` entries.
    pub fn check_classes(&self, k: usize) -> Result<()> {
        for d in &self.detections {
            if d.probs.len() != k {
                return Err(Error::InvalidDistribution(format!(
                    "frame {}: distribution has {} entries, video has {k} classes",
                    self.frame_index,
                    d.probs.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub frame_index: usize,
    pub objects: Vec<GroundTruthObject>,
}

impl GroundTruthFrame {
    pub fn validate(&self, k: usize) -> Result<()> {
        for obj in &self.objects {
            obj.bbox.validate()?;
            if obj.class >= k {
                return Err(Error::InvalidBox(format!(
                    "frame {}: class {} out of range for {k} classes",
                    self.frame_index, obj.class
                )));
            }
        }
        Ok(())
    }

    /// Annotated objects as certain detections (one-hot distributions).
    pub fn as_detections(&self, k: usize) -> FrameDetections {
        FrameDetections {
            frame_index: self.frame_index,
            detections: self
                .objects
                .iter()
                .map(|o| Detection {
                    bbox: o.bbox,
                    probs: ClassDistribution::one_hot(k, o.class),
                })
                .collect(),
        }
    }

    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for obj in &self.objects {
            counts[obj.class] += 1;
        }
        counts
    }
}

/// Keeps detections whose max class probability reaches `threshold`.
pub fn filter_detections(frame: &FrameDetections, threshold: f64) -> FrameDetections {
    FrameDetections {
        frame_index: frame.frame_index,
        detections: frame
            .detections
            .iter()
            .filter(|d| d.confidence() >= threshold)
            .cloned()
            .collect(),
    }
}

/// Number of detections per argmax class.
pub fn class_counts(frame: &FrameDetections, k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for d in &frame.detections {
        counts[d.class()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(probs: &[f64]) -> Detection {
        Detection {
            bbox: BBox::new(10.0, 10.0, 4.0, 4.0).unwrap(),
            probs: ClassDistribution::new(probs.to_vec()).unwrap(),
        }
    }

    fn frame(dets: Vec<Detection>) -> FrameDetections {
        FrameDetections {
            frame_index: 3,
            detections: dets,
        }
    }

    #[test]
    fn meta_bounds() {
        let names = || vec!["person".to_string(), "background".to_string()];
        assert!(VideoMeta::new(1, 1, 2, names()).is_ok());
        assert!(VideoMeta::new(0, 1, 2, names()).is_err());
        assert!(VideoMeta::new(4, 4, 1, names()).is_err());
        assert!(VideoMeta::new(4, 4, 5, vec!["a".into()]).is_err());
    }

    #[test]
    fn distribution_renormalizes_within_tolerance() {
        let d = ClassDistribution::new(vec![0.6 + 5e-7, 0.4]).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(ClassDistribution::new(vec![0.6, 0.5]).is_err());
        assert!(ClassDistribution::new(vec![1.2, -0.2]).is_err());
        assert!(ClassDistribution::new(vec![1.0]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(ClassDistribution::new(vec![0.5, 0.5]).unwrap().argmax(), 0);
        assert_eq!(ClassDistribution::new(vec![0.2, 0.4, 0.4]).unwrap().argmax(), 1);
    }

    #[test]
    fn filter_identity_and_boundary() {
        let f = frame(vec![det(&[0.9, 0.1]), det(&[0.4, 0.6]), det(&[0.6, 0.4])]);
        assert_eq!(filter_detections(&f, 0.0), f);
        assert!(filter_detections(&f, 1.0).detections.is_empty());
    }

    #[test]
    fn filter_keeps_confident_in_order() {
        // max-probs 0.9, 0.4 and 0.6 over three classes
        let f = frame(vec![
            det(&[0.9, 0.05, 0.05]),
            det(&[0.4, 0.3, 0.3]),
            det(&[0.2, 0.6, 0.2]),
        ]);
        let kept = filter_detections(&f, 0.5);
        assert_eq!(kept.detections.len(), 2);
        assert_eq!(kept.detections[0], f.detections[0]);
        assert_eq!(kept.detections[1], f.detections[2]);
        assert_eq!(kept.frame_index, 3);
    }

    #[test]
    fn counts_by_argmax() {
        assert_eq!(class_counts(&frame(vec![]), 2), vec![0, 0]);
        let f = frame(vec![det(&[0.9, 0.1]), det(&[0.8, 0.2]), det(&[0.7, 0.3])]);
        assert_eq!(class_counts(&f, 2), vec![3, 0]);
        let f = frame(vec![det(&[0.6, 0.4]), det(&[0.3, 0.7])]);
        assert_eq!(class_counts(&f, 2), vec![1, 1]);
    }

    #[test]
    fn ground_truth_as_certain_detections() {
        let gt = GroundTruthFrame {
            frame_index: 1,
            objects: vec![GroundTruthObject {
                bbox: BBox::new(5.0, 5.0, 2.0, 2.0).unwrap(),
                class: 1,
            }],
        };
        let d = gt.as_detections(3);
        assert_eq!(d.detections[0].probs.probs(), &[0.0, 1.0, 0.0]);
        assert_eq!(gt.class_counts(3), vec![0, 1, 0]);
        assert!(gt.validate(1).is_err());
    }

    #[test]
    fn corner_conversion() {
        let b = BBox::from_corners(2.0, 4.0, 6.0, 10.0).unwrap();
        assert_eq!(b, BBox::new(4.0, 7.0, 4.0, 6.0).unwrap());
        assert!(BBox::from_corners(6.0, 0.0, 2.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_and_counts_total(
            rows in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 0..12),
            threshold in 0.0f64..1.0,
        ) {
            let dets: Vec<Detection> = rows
                .iter()
                .map(|&(a, b, c)| {
                    let s = a + b + c + 1e-9;
                    det(&[a / s, b / s, c / s])
                })
                .collect();
            let f = frame(dets);
            let once = filter_detections(&f, threshold);
            let twice = filter_detections(&once, threshold);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(class_counts(&once, 3).iter().sum::<usize>(), once.detections.len());
        }
    }
}
