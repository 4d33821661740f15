//! A simulated detector that corrupts ground truth.
//!
//! Noise is configured per frame range and shrinks near annotated frames
//! (the "learning" stand-in): every parameter is scaled by
//! `max(floor, min(1, d / d0))` where `d` is the distance to the nearest
//! labeled frame. All random draws come from a per-frame ChaCha stream and are
//! made in a fixed order regardless of the noise level, so runs that differ
//! only in noise scale share their underlying random numbers.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::active_loop::derive_seed;
use crate::error::{Error, Result};
use crate::model::{
    BBox, ClassDistribution, Detection, FrameDetections, GroundTruthFrame, GroundTruthObject, VideoMeta,
};

use super::{DetectionRequest, DetectionSource};

pub const NOISE_SCHEMA: &str = "vidal.noise.v1";

/// Reference spurious-box area, as a fraction of the frame, when a frame has no objects.
const EMPTY_FRAME_AREA_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Per-object drop probability.
    pub p_miss: f64,
    /// Expected spurious boxes per frame.
    pub p_spurious: f64,
    /// Box noise std as a fraction of box size.
    pub jitter_sigma: f64,
    /// Class softening; 0 is one-hot.
    pub class_temperature: f64,
}

impl NoiseParams {
    pub const ZERO: NoiseParams = NoiseParams {
        p_miss: 0.0,
        p_spurious: 0.0,
        jitter_sigma: 0.0,
        class_temperature: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let finite_non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !(0.0..=1.0).contains(&self.p_miss) {
            return Err(Error::InvalidConfig(format!(
                "p_miss {} outside [0, 1]",
                self.p_miss
            )));
        }
        if !finite_non_negative(self.p_spurious)
            || !finite_non_negative(self.jitter_sigma)
            || !(self.class_temperature >= 0.0)
        {
            return Err(Error::InvalidConfig(format!("invalid noise parameters {self:?}")));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> NoiseParams {
        NoiseParams {
            p_miss: self.p_miss * factor,
            p_spurious: self.p_spurious * factor,
            jitter_sigma: self.jitter_sigma * factor,
            class_temperature: self.class_temperature * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRange {
    pub start: usize,
    pub end: usize,
    #[serde(flatten)]
    pub params: NoiseParams,
}

/// Noise parameters over contiguous, non-overlapping frame ranges covering the video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub ranges: Vec<NoiseRange>,
}

impl NoiseProfile {
    pub fn uniform(num_frames: usize, params: NoiseParams) -> Self {
        NoiseProfile {
            ranges: vec![NoiseRange {
                start: 0,
                end: num_frames,
                params,
            }],
        }
    }

    /// Builds a profile from `(start, end, params)` segments with `base` filling the gaps.
    pub fn with_segments(
        num_frames: usize,
        base: NoiseParams,
        segments: &[(usize, usize, NoiseParams)],
    ) -> Result<Self> {
        let mut sorted = segments.to_vec();
        sorted.sort_by_key(|s| s.0);
        let mut ranges = Vec::new();
        let mut cursor = 0;
        for (start, end, params) in sorted {
            if start < cursor || end <= start || end > num_frames {
                return Err(Error::InvalidConfig(format!(
                    "noise segment [{start}, {end}) overlaps or leaves the video"
                )));
            }
            if start > cursor {
                ranges.push(NoiseRange {
                    start: cursor,
                    end: start,
                    params: base,
                });
            }
            ranges.push(NoiseRange { start, end, params });
            cursor = end;
        }
        if cursor < num_frames {
            ranges.push(NoiseRange {
                start: cursor,
                end: num_frames,
                params: base,
            });
        }
        let profile = NoiseProfile { ranges };
        profile.validate(num_frames)?;
        Ok(profile)
    }

    pub fn validate(&self, num_frames: usize) -> Result<()> {
        let mut cursor = 0;
        for r in &self.ranges {
            if r.start != cursor || r.end <= r.start {
                return Err(Error::InvalidConfig(format!(
                    "noise range [{}, {}) does not continue from frame {cursor}",
                    r.start, r.end
                )));
            }
            r.params.validate()?;
            cursor = r.end;
        }
        if cursor != num_frames {
            return Err(Error::InvalidConfig(format!(
                "noise ranges end at {cursor}, video has {num_frames} frames"
            )));
        }
        Ok(())
    }

    pub fn params_at(&self, frame: usize) -> NoiseParams {
        self.ranges
            .iter()
            .find(|r| (r.start..r.end).contains(&frame))
            .map(|r| r.params)
            .unwrap_or(NoiseParams::ZERO)
    }
}

/// How quickly detector noise fades toward annotated frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningDecay {
    /// Distance at which noise reaches full strength.
    pub d0: f64,
    /// Residual noise fraction right at a labeled frame.
    pub floor: f64,
}

impl LearningDecay {
    /// No decay: full-profile noise everywhere.
    pub const NONE: LearningDecay = LearningDecay { d0: 1.0, floor: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.d0 >= 1.0) || !(0.0..=1.0).contains(&self.floor) {
            return Err(Error::InvalidConfig(format!("invalid learning decay {self:?}")));
        }
        Ok(())
    }

    pub fn factor(&self, distance: usize) -> f64 {
        (distance as f64 / self.d0).min(1.0).max(self.floor)
    }
}

/// Distance from `frame` to the nearest member of `labeled` (`usize::MAX` when empty).
pub fn distance_to_labeled(frame: usize, labeled: &BTreeSet<usize>) -> usize {
    let after = labeled.range(frame..).next().map(|&g| g - frame);
    let before = labeled.range(..frame).next_back().map(|&g| frame - g);
    after.into_iter().chain(before).min().unwrap_or(usize::MAX)
}

pub fn effective_noise(
    frame: usize,
    profile: &NoiseProfile,
    decay: &LearningDecay,
    labeled: &BTreeSet<usize>,
) -> NoiseParams {
    let d = distance_to_labeled(frame, labeled);
    profile.params_at(frame).scaled(decay.factor(d))
}

/// Temperature-softened one-hot: the true class keeps `1 / (1 + (k−1)e^{−1/τ})`.
pub fn soften(k: usize, class: usize, temperature: f64) -> ClassDistribution {
    if temperature <= 0.0 {
        return ClassDistribution::one_hot(k, class);
    }
    let e = (-1.0 / temperature).exp();
    let norm = 1.0 + (k - 1) as f64 * e;
    let probs = (0..k)
        .map(|c| if c == class { 1.0 / norm } else { e / norm })
        .collect();
    ClassDistribution::new(probs).expect("softened distribution is normalized")
}

/// Smallest `n` with Poisson CDF(n; λ) ≥ u.
fn poisson_quantile(lambda: f64, u: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let mut n = 0;
    while cdf < u && n < 1000 {
        n += 1;
        p *= lambda / n as f64;
        cdf += p;
    }
    n
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Corrupts one frame of ground truth.
///
/// Each object consumes one uniform (miss) and four normals (jitter), then one
/// uniform fixes the spurious count and each spurious box consumes five more.
pub fn synthesize_detections(
    gt: &GroundTruthFrame,
    params: &NoiseParams,
    meta: &VideoMeta,
    seed: u64,
) -> FrameDetections {
    let k = meta.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, gt.frame_index as u64));
    let mut detections = Vec::with_capacity(gt.objects.len());

    for obj in &gt.objects {
        let u: f64 = rng.random();
        let z: [f64; 4] = std::array::from_fn(|_| normal(&mut rng));
        if u < params.p_miss {
            continue;
        }
        let s = params.jitter_sigma;
        let b = obj.bbox;
        let bbox = BBox {
            cx: b.cx + z[0] * s * b.bw,
            cy: b.cy + z[1] * s * b.bh,
            bw: (b.bw + z[2] * s * b.bw).max(0.0),
            bh: (b.bh + z[3] * s * b.bh).max(0.0),
        };
        detections.push(Detection {
            bbox,
            probs: soften(k, obj.class, params.class_temperature),
        });
    }

    let count = poisson_quantile(params.p_spurious, rng.random());
    if count > 0 {
        let (ref_area, aspect) = if gt.objects.is_empty() {
            (EMPTY_FRAME_AREA_FRACTION * (meta.width * meta.height) as f64, 1.0)
        } else {
            let n = gt.objects.len() as f64;
            let area = gt.objects.iter().map(|o| o.bbox.area()).sum::<f64>() / n;
            let aspect = gt
                .objects
                .iter()
                .map(|o| {
                    if o.bbox.bh > 0.0 {
                        o.bbox.bw / o.bbox.bh
                    } else {
                        1.0
                    }
                })
                .sum::<f64>()
                / n;
            (area, aspect)
        };
        for _ in 0..count {
            let area = ref_area * rng.random_range(0.2..=1.0);
            let cx = rng.random_range(0.0..meta.width as f64);
            let cy = rng.random_range(0.0..meta.height as f64);
            let class = rng.random_range(0..k);
            let lead = 0.5 + 0.1 * rng.random::<f64>();
            let bw = (area * aspect).sqrt();
            let bh = if bw > 0.0 { area / bw } else { 0.0 };
            let rest = (1.0 - lead) / (k - 1) as f64;
            let probs = (0..k).map(|c| if c == class { lead } else { rest }).collect();
            detections.push(Detection {
                bbox: BBox { cx, cy, bw, bh },
                probs: ClassDistribution::new(probs).expect("spurious distribution is normalized"),
            });
        }
    }

    FrameDetections {
        frame_index: gt.frame_index,
        detections,
    }
}

/// On-disk noise configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseDocument {
    pub schema: String,
    pub ranges: Vec<NoiseRange>,
    pub decay: LearningDecay,
}

impl NoiseDocument {
    pub fn new(profile: &NoiseProfile, decay: LearningDecay) -> Self {
        NoiseDocument {
            schema: NOISE_SCHEMA.to_string(),
            ranges: profile.ranges.clone(),
            decay,
        }
    }

    pub fn into_parts(self, num_frames: usize) -> Result<(NoiseProfile, LearningDecay)> {
        if self.schema != NOISE_SCHEMA {
            return Err(Error::Schema {
                expected: NOISE_SCHEMA.into(),
                found: self.schema,
            });
        }
        let profile = NoiseProfile { ranges: self.ranges };
        profile.validate(num_frames)?;
        self.decay.validate()?;
        Ok((profile, self.decay))
    }
}

/// Detector stand-in backed by full ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    meta: VideoMeta,
    ground_truth: BTreeMap<usize, GroundTruthFrame>,
    profile: NoiseProfile,
    decay: LearningDecay,
    seed: u64,
}

impl SyntheticDetector {
    pub fn new(
        meta: VideoMeta,
        ground_truth: Vec<GroundTruthFrame>,
        profile: NoiseProfile,
        decay: LearningDecay,
        seed: u64,
    ) -> Result<Self> {
        meta.validate()?;
        profile.validate(meta.num_frames)?;
        decay.validate()?;
        let k = meta.num_classes();
        let mut by_frame = BTreeMap::new();
        for gt in ground_truth {
            meta.check_frame(gt.frame_index)?;
            gt.validate(k)?;
            if by_frame.insert(gt.frame_index, gt).is_some() {
                return Err(Error::InvalidConfig("ground truth lists a frame twice".into()));
            }
        }
        if by_frame.len() != meta.num_frames {
            return Err(Error::InvalidConfig(format!(
                "ground truth covers {} of {} frames",
                by_frame.len(),
                meta.num_frames
            )));
        }
        Ok(SyntheticDetector {
            meta,
            ground_truth: by_frame,
            profile,
            decay,
            seed,
        })
    }

    pub fn meta(&self) -> &VideoMeta {
        &self.meta
    }

    pub fn ground_truth(&self, frame: usize) -> &GroundTruthFrame {
        &self.ground_truth[&frame]
    }

    /// Simulated detections for `frames` given the current labeled set.
    ///
    /// `stream` selects an independent family of random draws.
    pub fn detect(
        &self,
        frames: &[usize],
        labeled: &BTreeSet<usize>,
        stream: u64,
    ) -> BTreeMap<usize, FrameDetections> {
        let seed = derive_seed(self.seed, stream);
        frames
            .iter()
            .filter_map(|&i| {
                let gt = self.ground_truth.get(&i)?;
                let params = effective_noise(i, &self.profile, &self.decay, labeled);
                Some((i, synthesize_detections(gt, &params, &self.meta, seed)))
            })
            .collect()
    }
}

impl DetectionSource for SyntheticDetector {
    fn fetch(&mut self, request: &DetectionRequest<'_>) -> Result<BTreeMap<usize, FrameDetections>> {
        Ok(self.detect(request.frames, request.labeled, request.iteration as u64))
    }
}

/// Parameters for a generated ground-truth video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Number of object tracks.
    pub tracks: usize,
    /// Probability that a track only exists for part of the video.
    pub churn: f64,
    /// Maximum speed in pixels per frame (0 for a static scene).
    pub max_speed: f64,
    /// Box side lengths are drawn from this range, in pixels.
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            tracks: 4,
            churn: 0.5,
            max_speed: 2.0,
            min_size: 20.0,
            max_size: 60.0,
        }
    }
}

/// Generates objects moving on straight lines that bounce off the frame edges.
pub fn generate_ground_truth(meta: &VideoMeta, scene: &SceneConfig, seed: u64) -> Vec<GroundTruthFrame> {
    let m = meta.num_frames;
    let k = meta.num_classes();
    let (w, h) = (meta.width as f64, meta.height as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    struct Track {
        class: usize,
        span: (usize, usize),
        size: (f64, f64),
        start: (f64, f64),
        velocity: (f64, f64),
    }

    let tracks: Vec<Track> = (0..scene.tracks)
        .map(|t| {
            let bw = rng.random_range(scene.min_size..=scene.max_size);
            let bh = rng.random_range(scene.min_size..=scene.max_size);
            let span = if rng.random::<f64>() < scene.churn {
                let a = rng.random_range(0..m);
                let b = rng.random_range(0..m);
                (a.min(b), a.max(b) + 1)
            } else {
                (0, m)
            };
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(0.0..=scene.max_speed);
            Track {
                class: t % k,
                span,
                size: (bw, bh),
                start: (rng.random_range(0.0..w), rng.random_range(0.0..h)),
                velocity: (speed * angle.cos(), speed * angle.sin()),
            }
        })
        .collect();

    // position after `t` frames of motion, reflected into [lo, hi]
    fn bounce(start: f64, v: f64, t: f64, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return (lo + hi) / 2.0;
        }
        let period = 2.0 * (hi - lo);
        let x = (start - lo + v * t).rem_euclid(period);
        lo + if x > hi - lo { period - x } else { x }
    }

    (0..m)
        .map(|i| GroundTruthFrame {
            frame_index: i,
            objects: tracks
                .iter()
                .filter(|tr| (tr.span.0..tr.span.1).contains(&i))
                .map(|tr| {
                    let (bw, bh) = tr.size;
                    let t = i as f64;
                    let cx = bounce(tr.start.0, tr.velocity.0, t, bw / 2.0, w - bw / 2.0);
                    let cy = bounce(tr.start.1, tr.velocity.1, t, bh / 2.0, h - bh / 2.0);
                    GroundTruthObject {
                        bbox: BBox { cx, cy, bw, bh },
                        class: tr.class,
                    }
                })
                .collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::instance_entropy;

    fn meta() -> VideoMeta {
        VideoMeta::new(320, 240, 100, vec!["person".into(), "ball".into()]).unwrap()
    }

    fn gt() -> GroundTruthFrame {
        GroundTruthFrame {
            frame_index: 12,
            objects: vec![
                GroundTruthObject {
                    bbox: BBox::new(50.0, 60.0, 30.0, 40.0).unwrap(),
                    class: 0,
                },
                GroundTruthObject {
                    bbox: BBox::new(150.0, 100.0, 20.0, 20.0).unwrap(),
                    class: 1,
                },
            ],
        }
    }

    fn noisy() -> NoiseParams {
        NoiseParams {
            p_miss: 0.3,
            p_spurious: 1.0,
            jitter_sigma: 0.2,
            class_temperature: 1.0,
        }
    }

    #[test]
    fn decay_scaling() {
        let profile = NoiseProfile::uniform(100, noisy());
        let decay = LearningDecay { d0: 10.0, floor: 0.0 };
        let labeled: BTreeSet<usize> = [20, 60].into();
        assert_eq!(effective_noise(20, &profile, &decay, &labeled), NoiseParams::ZERO);
        assert_eq!(effective_noise(90, &profile, &decay, &labeled), noisy());
        let half = effective_noise(25, &profile, &decay, &labeled);
        assert!((half.p_miss - 0.15).abs() < 1e-12);
        assert!((half.jitter_sigma - 0.1).abs() < 1e-12);

        let floored = LearningDecay {
            d0: 10.0,
            floor: 0.25,
        };
        assert!((effective_noise(20, &profile, &floored, &labeled).p_spurious - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_is_identity() {
        let d = synthesize_detections(&gt(), &NoiseParams::ZERO, &meta(), 9);
        assert_eq!(d, gt().as_detections(2));
    }

    #[test]
    fn full_miss_empties_frame() {
        let params = NoiseParams {
            p_miss: 1.0,
            ..NoiseParams::ZERO
        };
        assert!(synthesize_detections(&gt(), &params, &meta(), 9)
            .detections
            .is_empty());
    }

    #[test]
    fn hot_temperature_flattens() {
        let p = soften(3, 1, f64::INFINITY);
        assert!((instance_entropy(&p, true) - 1.0).abs() < 1e-12);
        let p = soften(3, 1, 1e9);
        assert!(instance_entropy(&p, true) > 0.999_999);
        assert_eq!(soften(3, 1, 0.0).probs(), &[0.0, 1.0, 0.0]);
        assert_eq!(soften(4, 2, 0.7).argmax(), 2);
    }

    #[test]
    fn seeded_determinism() {
        let a = synthesize_detections(&gt(), &noisy(), &meta(), 42);
        let b = synthesize_detections(&gt(), &noisy(), &meta(), 42);
        assert_eq!(a, b);
        let runs: Vec<_> = (0..20)
            .map(|s| synthesize_detections(&gt(), &noisy(), &meta(), s))
            .collect();
        assert!(runs.iter().any(|r| r != &a));
    }

    #[test]
    fn spurious_boxes_pass_default_threshold() {
        let params = NoiseParams {
            p_spurious: 5.0,
            ..NoiseParams::ZERO
        };
        let d = synthesize_detections(&gt(), &params, &meta(), 3);
        assert!(d.detections.len() > 2);
        for det in &d.detections[2..] {
            assert!(det.confidence() >= 0.5 && det.confidence() <= 0.6 + 1e-12);
            let area = det.bbox.area();
            assert!((0.2 * 800.0 - 1e-9..=800.0 + 1e-9).contains(&area));
        }
    }

    #[test]
    fn poisson_quantile_edges() {
        assert_eq!(poisson_quantile(0.0, 0.99), 0);
        assert_eq!(poisson_quantile(1.0, 0.0), 0);
        assert_eq!(poisson_quantile(1.0, 0.5), 1);
        assert!(poisson_quantile(3.0, 0.999) >= 6);
    }

    #[test]
    fn profile_validation() {
        assert!(NoiseProfile::uniform(10, noisy()).validate(10).is_ok());
        assert!(NoiseProfile::uniform(10, noisy()).validate(11).is_err());
        let p = NoiseProfile::with_segments(300, NoiseParams::ZERO, &[(100, 151, noisy())]).unwrap();
        assert_eq!(p.ranges.len(), 3);
        assert_eq!(p.params_at(150), noisy());
        assert_eq!(p.params_at(151), NoiseParams::ZERO);
        assert!(
            NoiseProfile::with_segments(300, NoiseParams::ZERO, &[(10, 20, noisy()), (15, 30, noisy())])
                .is_err()
        );
        let bad = NoiseParams {
            p_miss: 1.5,
            ..NoiseParams::ZERO
        };
        assert!(NoiseProfile::uniform(5, bad).validate(5).is_err());
        assert!(LearningDecay { d0: 0.5, floor: 0.0 }.validate().is_err());
    }

    #[test]
    fn generated_scene_is_reproducible_and_in_frame() {
        let m = meta();
        let scene = SceneConfig::default();
        let a = generate_ground_truth(&m, &scene, 5);
        assert_eq!(a, generate_ground_truth(&m, &scene, 5));
        assert_eq!(a.len(), 100);
        for f in &a {
            for o in &f.objects {
                assert!(o.bbox.x0() >= -1e-9 && o.bbox.x1() <= 320.0 + 1e-9);
                assert!(o.bbox.y0() >= -1e-9 && o.bbox.y1() <= 240.0 + 1e-9);
            }
        }
        let still = SceneConfig {
            max_speed: 0.0,
            churn: 0.0,
            ..scene
        };
        let s = generate_ground_truth(&m, &still, 5);
        assert!(s.windows(2).all(|p| p[0].objects == p[1].objects));
    }
}
