//! Detection quality: box IoU, greedy matching, 11-point interpolated AP and
//! mAP averaged over classes and IoU thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BBox, FrameDetections, GroundTruthFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_points: eleven_points(),
        }
    }
}

fn eleven_points() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

impl EvalConfig {
    pub fn with_thresholds(iou_thresholds: Vec<f64>) -> Result<Self> {
        let config = EvalConfig {
            iou_thresholds,
            recall_points: eleven_points(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::InvalidConfig("no IoU thresholds".into()));
        }
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::InvalidConfig("IoU thresholds must lie in (0, 1)".into()));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "IoU thresholds must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Parses `start:step:end`, a comma list, or a single value.
pub fn parse_thresholds(text: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidConfig(format!("bad threshold {s:?}")))
    };
    let parts: Vec<&str> = text.split(':').collect();
    if let [start, step, end] = parts[..] {
        let (start, step, end) = (num(start)?, num(step)?, num(end)?);
        if !(step > 0.0) || end < start {
            return Err(Error::InvalidConfig(format!("bad threshold range {text:?}")));
        }
        let count = ((end - start) / step + 1e-9).floor() as usize + 1;
        // round to 12 digits so 0.5 + 3 * 0.05 prints as 0.65
        return Ok((0..count)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect());
    }
    if parts.len() != 1 {
        return Err(Error::InvalidConfig(format!("bad threshold spec {text:?}")));
    }
    text.split(',').map(num).collect()
}

/// Continuous-geometry IoU of two axis-aligned boxes.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Greedy matching in the given (confidence-descending) order.
///
/// Each prediction claims the unmatched ground-truth box of highest IoU, if
/// that IoU reaches `threshold`. Returns the true-positive flag per prediction.
pub fn match_greedy(predictions: &[BBox], ground_truth: &[BBox], threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; ground_truth.len()];
    predictions
        .iter()
        .map(|p| {
            let best = ground_truth
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, box_iou(p, g)))
                .filter(|&(_, iou)| iou >= threshold)
                .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                    Some(a) if a.1 >= cur.1 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Interpolated AP over the configured recall points.
///
/// `ranked` holds `(confidence, is_true_positive)` sorted by confidence
/// descending. With no ground truth, AP is 1 for no detections and 0 otherwise.
pub fn average_precision(ranked: &[(f64, bool)], n_gt: usize, config: &EvalConfig) -> f64 {
    if n_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    let mut curve = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (rank, &(_, hit)) in ranked.iter().enumerate() {
        tp += usize::from(hit);
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // precision envelope: max precision at any recall >= r
    let mut envelope = curve.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let total: f64 = config
        .recall_points
        .iter()
        .map(|&r| {
            envelope
                .iter()
                .find(|&&(recall, _)| recall + 1e-12 >= r)
                .map_or(0.0, |&(_, p)| p)
        })
        .sum();
    total / config.recall_points.len() as f64
}

/// Sorts `(confidence, flag)` pairs by confidence descending, keeping input order on ties.
pub fn rank_by_confidence(mut scored: Vec<(f64, bool)>) -> Vec<(f64, bool)> {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub num_ground_truth: usize,
    pub num_predictions: usize,
    /// AP at each configured IoU threshold.
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
}

/// Confidence-ranked predictions and ground-truth boxes of one class in one frame.
type FrameCandidates = (Vec<(f64, BBox)>, Vec<BBox>);

/// mAP over classes and thresholds for the frames listed in `ground_truth`.
///
/// Frames without predictions count as empty; predictions for frames
/// missing from the ground truth are ignored. Classes with neither ground
/// truth nor predictions are left out of the mean.
pub fn mean_ap(
    predictions: &BTreeMap<usize, FrameDetections>,
    ground_truth: &[GroundTruthFrame],
    num_classes: usize,
    config: &EvalConfig,
) -> Result<MapReport> {
    config.validate()?;
    let total_gt: usize = ground_truth.iter().map(|f| f.objects.len()).sum();
    if total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }

    let mut classes = Vec::new();
    for class in 0..num_classes {
        // per frame: predictions of this class (confidence-sorted) and GT boxes
        let frames: Vec<FrameCandidates> = ground_truth
            .iter()
            .map(|gt| {
                let mut preds: Vec<(f64, BBox)> = predictions
                    .get(&gt.frame_index)
                    .map(|f| {
                        f.detections
                            .iter()
                            .filter(|d| d.class() == class)
                            .map(|d| (d.confidence(), d.bbox))
                            .collect()
                    })
                    .unwrap_or_default();
                preds.sort_by(|a, b| b.0.total_cmp(&a.0));
                let boxes = gt
                    .objects
                    .iter()
                    .filter(|o| o.class == class)
                    .map(|o| o.bbox)
                    .collect();
                (preds, boxes)
            })
            .collect();
        let n_gt: usize = frames.iter().map(|(_, g)| g.len()).sum();
        let n_pred: usize = frames.iter().map(|(p, _)| p.len()).sum();
        if n_gt == 0 && n_pred == 0 {
            continue;
        }
        let ap = config
            .iou_thresholds
            .iter()
            .map(|&threshold| {
                let scored: Vec<(f64, bool)> = frames
                    .iter()
                    .flat_map(|(preds, boxes)| {
                        let pred_boxes: Vec<BBox> = preds.iter().map(|p| p.1).collect();
                        let flags = match_greedy(&pred_boxes, boxes, threshold);
                        preds.iter().map(|p| p.0).zip(flags).collect::<Vec<_>>()
                    })
                    .collect();
                average_precision(&rank_by_confidence(scored), n_gt, config)
            })
            .collect();
        classes.push(ClassReport {
            class,
            num_ground_truth: n_gt,
            num_predictions: n_pred,
            ap,
        });
    }

    let values: Vec<f64> = classes.iter().flat_map(|c| c.ap.iter().copied()).collect();
    let map = values.iter().sum::<f64>() / values.len() as f64;
    Ok(MapReport {
        map,
        iou_thresholds: config.iou_thresholds.clone(),
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassDistribution, Detection, GroundTruthObject};

    fn b(cx: f64, cy: f64, bw: f64, bh: f64) -> BBox {
        BBox::new(cx, cy, bw, bh).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b(5.0, 5.0, 10.0, 10.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &b(50.0, 50.0, 10.0, 10.0)), 0.0);
        // shifted by 5 along x: intersection 50, union 150
        assert!((box_iou(&a, &b(10.0, 5.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(box_iou(&b(1.0, 1.0, 0.0, 0.0), &b(1.0, 1.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn ap_simple_cases() {
        let cfg = EvalConfig::default();
        assert_eq!(average_precision(&[(0.9, true)], 1, &cfg), 1.0);
        assert_eq!(average_precision(&[(0.9, false)], 1, &cfg), 0.0);
        assert_eq!(average_precision(&[], 0, &cfg), 1.0);
        assert_eq!(average_precision(&[(0.3, false)], 0, &cfg), 0.0);
        assert_eq!(average_precision(&[], 3, &cfg), 0.0);
    }

    #[test]
    fn ap_tp_fp_tp() {
        let cfg = EvalConfig::default();
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2, &cfg);
        assert!((ap - 28.0 / 33.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_prefers_highest_iou_and_never_reuses() {
        let gts = [b(10.0, 10.0, 10.0, 10.0), b(13.0, 10.0, 10.0, 10.0)];
        let preds = [
            b(13.0, 10.0, 10.0, 10.0),
            b(13.5, 10.0, 10.0, 10.0),
            b(12.0, 10.0, 10.0, 10.0),
        ];
        // the second prediction overlaps B best, but B is taken and A is below threshold
        assert_eq!(match_greedy(&preds, &gts, 0.5), vec![true, false, true]);
    }

    #[test]
    fn threshold_parsing() {
        let t = parse_thresholds("0.5:0.05:0.95").unwrap();
        assert_eq!(t, EvalConfig::default().iou_thresholds);
        assert_eq!(parse_thresholds("0.5,0.75").unwrap(), vec![0.5, 0.75]);
        assert_eq!(parse_thresholds("0.5").unwrap(), vec![0.5]);
        assert!(parse_thresholds("0.5:0:0.9").is_err());
        assert!(EvalConfig::with_thresholds(vec![0.7, 0.5]).is_err());
        assert!(EvalConfig::with_thresholds(vec![1.0]).is_err());
    }

    fn frames() -> Vec<GroundTruthFrame> {
        (0..4)
            .map(|i| GroundTruthFrame {
                frame_index: i,
                objects: vec![
                    GroundTruthObject {
                        bbox: b(20.0 + i as f64, 30.0, 12.0, 16.0),
                        class: 0,
                    },
                    GroundTruthObject {
                        bbox: b(60.0, 40.0 + i as f64, 8.0, 8.0),
                        class: 1,
                    },
                ],
            })
            .collect()
    }

    #[test]
    fn map_perfect_and_empty() {
        let gt = frames();
        let perfect: BTreeMap<usize, FrameDetections> =
            gt.iter().map(|f| (f.frame_index, f.as_detections(3))).collect();
        let report = mean_ap(&perfect, &gt, 3, &EvalConfig::default()).unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.classes.len(), 2);

        let report = mean_ap(&BTreeMap::new(), &gt, 3, &EvalConfig::default()).unwrap();
        assert_eq!(report.map, 0.0);

        let no_objects = vec![GroundTruthFrame {
            frame_index: 0,
            objects: vec![],
        }];
        assert!(matches!(
            mean_ap(&perfect, &no_objects, 3, &EvalConfig::default()),
            Err(Error::NoGroundTruth)
        ));
    }

    #[test]
    fn map_single_class_single_threshold_reduces_to_ap() {
        let gt = vec![GroundTruthFrame {
            frame_index: 0,
            objects: vec![
                GroundTruthObject {
                    bbox: b(10.0, 10.0, 10.0, 10.0),
                    class: 0,
                },
                GroundTruthObject {
                    bbox: b(40.0, 10.0, 10.0, 10.0),
                    class: 0,
                },
            ],
        }];
        let det = |cx: f64, p: f64| Detection {
            bbox: b(cx, 10.0, 10.0, 10.0),
            probs: ClassDistribution::new(vec![p, 1.0 - p]).unwrap(),
        };
        let preds: BTreeMap<usize, FrameDetections> = [(
            0,
            FrameDetections {
                frame_index: 0,
                detections: vec![det(10.0, 0.9), det(80.0, 0.8), det(40.0, 0.7)],
            },
        )]
        .into();
        let cfg = EvalConfig::with_thresholds(vec![0.5]).unwrap();
        let report = mean_ap(&preds, &gt, 2, &cfg).unwrap();
        assert!((report.map - 28.0 / 33.0).abs() < 1e-12);
        assert_eq!(report.classes[0].ap, vec![report.map]);
    }
}
