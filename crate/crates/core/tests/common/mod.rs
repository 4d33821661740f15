//! Independent reference implementations shared by the oracle and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use vidal_core::model::{BBox, ClassDistribution, Detection, FrameDetections};

/// Normalized entropy of (0.7, 0.2, 0.1), from 40-digit decimal arithmetic.
pub const ENTROPY_721: f64 = 0.729_846_699_162_097_5;

/// A box with coordinates on a quarter-pixel grid, so edge arithmetic is exact.
pub fn quarter_box(rng: &mut impl Rng, w: usize, h: usize) -> BBox {
    let q = |rng: &mut dyn rand::RngCore, lo: i64, hi: i64| rng.random_range(lo..=hi) as f64 / 4.0;
    let (w, h) = (w as i64 * 4, h as i64 * 4);
    BBox::new(
        q(rng, -w / 4, w + w / 4),
        q(rng, -h / 4, h + h / 4),
        q(rng, 0, w / 2),
        q(rng, 0, h / 2),
    )
    .unwrap()
}

/// Pixel (px, py) is covered when its center lies in `(lo, hi]` on both axes.
pub fn covered(b: &BBox, px: usize, py: usize) -> bool {
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    let (x0, x1) = (b.cx - b.bw / 2.0, b.cx + b.bw / 2.0);
    let (y0, y1) = (b.cy - b.bh / 2.0, b.cy + b.bh / 2.0);
    x0 < x && x <= x1 && y0 < y && y <= y1
}

/// Per-pixel union of boxes, row-major.
pub fn raster_oracle(boxes: &[BBox], w: usize, h: usize) -> Vec<bool> {
    let mut grid = Vec::with_capacity(w * h);
    for py in 0..h {
        for px in 0..w {
            grid.push(boxes.iter().any(|b| covered(b, px, py)));
        }
    }
    grid
}

pub fn iou_oracle(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn frame_of(boxes: &[BBox], k: usize) -> FrameDetections {
    FrameDetections {
        frame_index: 0,
        detections: boxes
            .iter()
            .map(|&bbox| Detection {
                bbox,
                probs: ClassDistribution::one_hot(k, 0),
            })
            .collect(),
    }
}

/// 11-point interpolated AP by sweeping every cutoff of the ranked list.
///
/// Recall is compared in integers: cutoff `n` reaches recall point `i/10`
/// iff `10·tp(n) ≥ i·n_gt`.
pub fn ap_oracle(flags: &[bool], n_gt: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..=10usize {
        let mut best: f64 = 0.0;
        for n in 1..=flags.len() {
            let tp = flags[..n].iter().filter(|&&f| f).count();
            if 10 * tp >= i * n_gt {
                best = best.max(tp as f64 / n as f64);
            }
        }
        total += best;
    }
    total / 11.0
}

/// Number of frames inside `lo..=hi`.
pub fn count_in(frames: &[usize], lo: usize, hi: usize) -> usize {
    frames.iter().filter(|&&f| (lo..=hi).contains(&f)).count()
}
