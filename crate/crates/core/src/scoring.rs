//! Per-frame informativeness signals.
//!
//! Three signals are computed per class for every candidate frame:
//!
//! - classification uncertainty `C`: the largest normalized entropy among the
//!   frame's detections of that class;
//! - instance discontinuity `Δn`: relative deviation of the detected count from
//!   a piecewise-linear curve through the annotated counts, capped at 1;
//! - box discontinuity `ΔH′`: one minus the mean IoU between the frame's
//!   pixel-occupancy grid and those of its temporal neighbors.
//!
//! All three lie in `[0, 1]` (with normalized entropy), so they can be
//! aggregated directly by the strategies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    class_counts, filter_detections, ClassDistribution, FrameDetections, VideoMeta,
    DEFAULT_CONFIDENCE_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Detections below this max-class probability are not counted as instances.
    pub confidence_threshold: f64,
    /// Divide entropies by `ln k` so `C` lies in `[0, 1]`.
    pub normalize_entropy: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            normalize_entropy: true,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::InvalidConfig(format!(
                "confidence threshold {} outside [0, 1]",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn instance_entropy(probs: &ClassDistribution, normalize: bool) -> f64 {
    let h: f64 = probs
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // -p ln p can round to -0.0 for p == 1
    let h = h.max(0.0);
    if normalize {
        (h / (probs.len() as f64).ln()).min(1.0)
    } else {
        h
    }
}

/// Max entropy over the detections assigned to `class`; 0 when there are none.
pub fn classification_score(frame: &FrameDetections, class: usize, normalize: bool) -> f64 {
    frame
        .detections
        .iter()
        .filter(|d| d.class() == class)
        .map(|d| instance_entropy(&d.probs, normalize))
        .fold(0.0, f64::max)
}

/// Estimated instance count per class over the frame axis.
///
/// Nodes are the annotated frames; values between nodes are linearly
/// interpolated and held constant beyond the outermost nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCurve {
    num_frames: usize,
    num_classes: usize,
    frames: Vec<usize>,
    counts: Vec<Vec<usize>>,
}

impl InstanceCurve {
    pub fn fit(labeled: &[(usize, Vec<usize>)], num_frames: usize) -> Result<Self> {
        let Some((_, first)) = labeled.first() else {
            return Err(Error::EmptyCurve);
        };
        let num_classes = first.len();
        let mut nodes: Vec<&(usize, Vec<usize>)> = labeled.iter().collect();
        nodes.sort_by_key(|(f, _)| *f);
        for pair in nodes.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::InvalidConfig(format!(
                    "duplicate curve node at frame {}",
                    pair[0].0
                )));
            }
        }
        for (frame, counts) in &nodes {
            if *frame >= num_frames {
                return Err(Error::FrameOutOfRange {
                    index: *frame,
                    frames: num_frames,
                });
            }
            if counts.len() != num_classes {
                return Err(Error::InvalidConfig(format!(
                    "frame {frame} has {} class counts, expected {num_classes}",
                    counts.len()
                )));
            }
        }
        Ok(InstanceCurve {
            num_frames,
            num_classes,
            frames: nodes.iter().map(|(f, _)| *f).collect(),
            counts: nodes.iter().map(|(_, c)| c.clone()).collect(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn estimate(&self, class: usize, frame: usize) -> f64 {
        let value = |node: usize| self.counts[node][class] as f64;
        let last = self.frames.len() - 1;
        if frame <= self.frames[0] {
            return value(0);
        }
        if frame >= self.frames[last] {
            return value(last);
        }
        // first node strictly right of `frame`
        let right = self.frames.partition_point(|&f| f <= frame);
        let left = right - 1;
        let (fa, fb) = (self.frames[left] as f64, self.frames[right] as f64);
        let t = (frame as f64 - fa) / (fb - fa);
        value(left) + t * (value(right) - value(left))
    }
}

/// `min(1, |n − ñ| / ñ)`; with `ñ = 0` the result is 0 for `n = 0`, else 1.
pub fn instance_discontinuity(n: usize, n_est: f64) -> f64 {
    let n = n as f64;
    if n_est > 0.0 {
        ((n - n_est).abs() / n_est).min(1.0)
    } else if n == 0.0 {
        0.0
    } else {
        1.0
    }
}

/// Binary W×H occupancy grid, row-major, packed into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalizationMatrix {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl LocalizationMatrix {
    pub fn new(width: usize, height: usize) -> Self {
        LocalizationMatrix {
            width,
            height,
            words: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let bit = y * self.width + x;
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Sets columns `[x0, x1)` of rows `[y0, y1)`; bounds must already be clamped.
    pub fn fill_rect(&mut self, x0: usize, x1: usize, y0: usize, y1: usize) {
        if x0 >= x1 {
            return;
        }
        for y in y0..y1 {
            let row = y * self.width;
            self.set_range(row + x0, row + x1);
        }
    }

    fn set_range(&mut self, start: usize, end: usize) {
        let mut bit = start;
        while bit < end {
            let word = bit / 64;
            let offset = bit % 64;
            let span = (64 - offset).min(end - bit);
            let mask = if span == 64 {
                u64::MAX
            } else {
                ((1u64 << span) - 1) << offset
            };
            self.words[word] |= mask;
            bit += span;
        }
    }
}

/// Pixel range `[lo, hi)` covered along one axis, rounded half-up and clamped to `[0, limit]`.
pub fn pixel_span(center: f64, size: f64, limit: usize) -> (usize, usize) {
    let edge = |v: f64| (v + 0.5).floor().clamp(0.0, limit as f64) as usize;
    (edge(center - size / 2.0), edge(center + size / 2.0))
}

/// Union of the pixel footprints of every detection assigned to `class`.
pub fn rasterize_class(frame: &FrameDetections, class: usize, meta: &VideoMeta) -> LocalizationMatrix {
    let mut grid = LocalizationMatrix::new(meta.width, meta.height);
    for d in frame.detections.iter().filter(|d| d.class() == class) {
        let (x0, x1) = pixel_span(d.bbox.cx, d.bbox.bw, meta.width);
        let (y0, y1) = pixel_span(d.bbox.cy, d.bbox.bh, meta.height);
        grid.fill_rect(x0, x1, y0, y1);
    }
    grid
}

/// Intersection over union of set pixels; two empty grids count as identical.
pub fn matrix_iou(a: &LocalizationMatrix, b: &LocalizationMatrix) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::DimensionMismatch {
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += u64::from((x & y).count_ones());
        union += u64::from((x | y).count_ones());
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// `1 − mean IoU` against whichever temporal neighbors exist.
pub fn bbox_discontinuity(
    prev: Option<&LocalizationMatrix>,
    current: &LocalizationMatrix,
    next: Option<&LocalizationMatrix>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for neighbor in [prev, next].into_iter().flatten() {
        total += matrix_iou(current, neighbor)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoNeighbor(0));
    }
    Ok((1.0 - total / count as f64).clamp(0.0, 1.0))
}

/// Raw signals for one class of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSignals {
    /// Classification uncertainty `C`.
    pub classification: f64,
    /// Instance discontinuity `Δn`.
    pub instance: f64,
    /// Box discontinuity `ΔH′`.
    pub boxes: f64,
}

impl ClassSignals {
    /// Localization uncertainty: the larger of the two temporal signals.
    pub fn localization(&self) -> f64 {
        self.boxes.max(self.instance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScoreBundle {
    pub frame_index: usize,
    pub classes: Vec<ClassSignals>,
}

impl FrameScoreBundle {
    /// Largest localization uncertainty over classes.
    pub fn localization(&self) -> f64 {
        self.classes
            .iter()
            .map(ClassSignals::localization)
            .fold(0.0, f64::max)
    }

    /// Largest classification uncertainty over classes.
    pub fn classification(&self) -> f64 {
        self.classes.iter().map(|c| c.classification).fold(0.0, f64::max)
    }

    /// Applies a per-class aggregation; the frame score is the per-class maximum.
    pub fn aggregate(&self, f: impl Fn(&ClassSignals) -> f64) -> (Vec<f64>, f64) {
        let per_class: Vec<f64> = self.classes.iter().map(f).collect();
        let frame_score = per_class.iter().copied().fold(0.0, f64::max);
        (per_class, frame_score)
    }
}

/// A frame's detections prepared for scoring: confidence-filtered, counted
/// and rasterized once so neighbors can share the grids.
#[derive(Debug, Clone)]
pub struct FrameView {
    pub detections: FrameDetections,
    pub counts: Vec<usize>,
    pub grids: Vec<LocalizationMatrix>,
}

impl FrameView {
    pub fn new(frame: &FrameDetections, meta: &VideoMeta, config: &ScoringConfig) -> Self {
        let k = meta.num_classes();
        let detections = filter_detections(frame, config.confidence_threshold);
        let counts = class_counts(&detections, k);
        let grids = (0..k).map(|c| rasterize_class(&detections, c, meta)).collect();
        FrameView {
            detections,
            counts,
            grids,
        }
    }
}

/// Scores one frame from prepared views of itself and its neighbors.
pub fn score_view(
    prev: Option<&FrameView>,
    current: &FrameView,
    next: Option<&FrameView>,
    curve: &InstanceCurve,
    config: &ScoringConfig,
) -> Result<FrameScoreBundle> {
    let frame_index = current.detections.frame_index;
    if prev.is_none() && next.is_none() {
        return Err(Error::NoNeighbor(frame_index));
    }
    let classes = (0..current.grids.len())
        .map(|c| {
            let boxes = bbox_discontinuity(
                prev.map(|v| &v.grids[c]),
                &current.grids[c],
                next.map(|v| &v.grids[c]),
            )?;
            Ok(ClassSignals {
                classification: classification_score(&current.detections, c, config.normalize_entropy),
                instance: instance_discontinuity(current.counts[c], curve.estimate(c, frame_index)),
                boxes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameScoreBundle { frame_index, classes })
}

/// Scores frame `current` against its neighbors (either may be absent, not both).
pub fn score_frame(
    prev: Option<&FrameDetections>,
    current: &FrameDetections,
    next: Option<&FrameDetections>,
    curve: &InstanceCurve,
    meta: &VideoMeta,
    config: &ScoringConfig,
) -> Result<FrameScoreBundle> {
    let view = |f: &FrameDetections| FrameView::new(f, meta, config);
    let prev = prev.map(view);
    let next = next.map(view);
    score_view(prev.as_ref(), &view(current), next.as_ref(), curve, config)
}
