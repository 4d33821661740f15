//! The query / annotate / train state machine for one video.
//!
//! A run starts with an evenly spaced guiding set pending annotation. Each
//! iteration then scores every unlabeled frame from fresh detections, queries
//! a batch, and waits until the batch is annotated before the next iteration
//! may run. The run stops once the labeled share of non-test frames reaches
//! the stop fraction.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FrameDetections, GroundTruthFrame, VideoMeta};
use crate::scoring::{score_view, FrameScoreBundle, FrameView, InstanceCurve, ScoringConfig};
use crate::strategy::{build_weight_curve, weighted_select, FrameScore, StrategyConfig, WeightCurve};

pub const DEFAULT_STOP_FRACTION: f64 = 0.8;
pub const DEFAULT_INIT_COUNT: usize = 10;
pub const DEFAULT_TEST_FRACTION: f64 = 0.1;

/// `q` evenly spaced frames `round(j·(m−1)/(q−1))`, always including both ends.
pub fn initial_guiding_set(num_frames: usize, count: usize) -> Result<Vec<usize>> {
    if count < 2 || count > num_frames {
        return Err(Error::InvalidConfig(format!(
            "initial guiding set of {count} frames needs 2 <= count <= {num_frames}"
        )));
    }
    let (span, steps) = (num_frames - 1, count - 1);
    let mut frames: Vec<usize> = (0..count).map(|j| (2 * j * span + steps) / (2 * steps)).collect();
    frames.dedup();
    Ok(frames)
}

/// Seeded uniform sample of `round(fraction·m)` frames outside the guiding set.
pub fn make_test_split(
    num_frames: usize,
    fraction: f64,
    guiding: &BTreeSet<usize>,
    seed: u64,
) -> Result<BTreeSet<usize>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "test fraction {fraction} outside [0, 1)"
        )));
    }
    let size = (fraction * num_frames as f64).round() as usize;
    let eligible: BTreeSet<usize> = (0..num_frames).filter(|i| !guiding.contains(i)).collect();
    if size > eligible.len() {
        return Err(Error::InvalidConfig(format!(
            "{size} test frames plus {} guiding frames exceed {num_frames} frames",
            guiding.len()
        )));
    }
    Ok(crate::strategy::passive_sample(&eligible, size, seed)
        .into_iter()
        .collect())
}

/// Mixes an iteration or epoch counter into a base seed.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    seed ^ counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `ceil(fraction · n)` tolerant of binary rounding (0.8 · 270 is 216, not 217).
pub fn stop_target(fraction: f64, non_test_frames: usize) -> usize {
    (fraction * non_test_frames as f64 - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub iteration: usize,
    pub frames: Vec<usize>,
    /// Weighted score of each queried frame, parallel to `frames`.
    pub weighted_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// Evaluation mAP after this batch was trained on, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopSettings {
    pub meta: VideoMeta,
    pub init_count: usize,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub strategy: StrategyConfig,
    pub stop_fraction: f64,
    pub scoring: ScoringConfig,
    /// Whether test frames act as temporal neighbors for `ΔH′`.
    pub test_neighbors: bool,
}

impl LoopSettings {
    pub fn new(meta: VideoMeta, strategy: StrategyConfig) -> Self {
        LoopSettings {
            meta,
            init_count: DEFAULT_INIT_COUNT,
            test_fraction: DEFAULT_TEST_FRACTION,
            split_seed: 0,
            strategy,
            stop_fraction: DEFAULT_STOP_FRACTION,
            scoring: ScoringConfig::default(),
            test_neighbors: true,
        }
    }
}

/// Every field of a [`LoopState`], for persistence.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopParts {
    pub meta: VideoMeta,
    pub strategy: StrategyConfig,
    pub scoring: ScoringConfig,
    pub stop_fraction: f64,
    pub test_neighbors: bool,
    pub iteration: usize,
    pub labeled: BTreeSet<usize>,
    pub unlabeled: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
    pub pending: BTreeSet<usize>,
    pub annotations: BTreeMap<usize, GroundTruthFrame>,
    pub history: Vec<QueryRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    parts: LoopParts,
}

/// What one call to [`LoopState::run_iteration`] produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub iteration: usize,
    pub batch: Vec<usize>,
    pub scores: Vec<FrameScore>,
    pub mu: Option<f64>,
    pub weights: WeightCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub accepted: Vec<usize>,
    pub remaining: Vec<usize>,
    pub iteration_complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDirective {
    pub iteration: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub queried: Vec<usize>,
    pub batches: Vec<Vec<usize>>,
}

impl LoopState {
    pub fn initialize(settings: LoopSettings) -> Result<Self> {
        settings.meta.validate()?;
        settings.strategy.validate()?;
        settings.scoring.validate()?;
        check_stop_fraction(settings.stop_fraction)?;
        let m = settings.meta.num_frames;
        let guiding: BTreeSet<usize> = initial_guiding_set(m, settings.init_count)?.into_iter().collect();
        let test = make_test_split(m, settings.test_fraction, &guiding, settings.split_seed)?;
        let unlabeled = (0..m).filter(|i| !test.contains(i)).collect();
        let history = vec![QueryRecord {
            iteration: 0,
            frames: guiding.iter().copied().collect(),
            weighted_scores: Vec::new(),
            mu: None,
            map: None,
        }];
        Ok(LoopState {
            parts: LoopParts {
                meta: settings.meta,
                strategy: settings.strategy,
                scoring: settings.scoring,
                stop_fraction: settings.stop_fraction,
                test_neighbors: settings.test_neighbors,
                iteration: 0,
                labeled: BTreeSet::new(),
                unlabeled,
                test,
                pending: guiding,
                annotations: BTreeMap::new(),
                history,
            },
        })
    }

    /// Rebuilds a state, checking every invariant.
    pub fn from_parts(parts: LoopParts) -> Result<Self> {
        let bad = |msg: String| Err(Error::CorruptState(msg));
        parts.meta.validate()?;
        parts.strategy.validate()?;
        parts.scoring.validate()?;
        check_stop_fraction(parts.stop_fraction)?;
        let m = parts.meta.num_frames;
        let k = parts.meta.num_classes();

        let mut seen = BTreeSet::new();
        for &i in parts.labeled.iter().chain(&parts.unlabeled).chain(&parts.test) {
            if i >= m {
                return bad(format!("frame {i} out of range for {m} frames"));
            }
            if !seen.insert(i) {
                return bad(format!("frame {i} appears in more than one partition"));
            }
        }
        if seen.len() != m {
            return bad(format!("partition covers {} of {m} frames", seen.len()));
        }
        if let Some(i) = parts.pending.iter().find(|i| !parts.unlabeled.contains(i)) {
            return bad(format!("pending frame {i} is not unlabeled"));
        }
        let annotated: BTreeSet<usize> = parts.annotations.keys().copied().collect();
        if annotated != parts.labeled {
            return bad("annotations do not match the labeled set".into());
        }
        for (&i, gt) in &parts.annotations {
            if gt.frame_index != i {
                return bad(format!("annotation keyed {i} carries frame {}", gt.frame_index));
            }
            gt.validate(k)?;
        }
        let mut queried = BTreeSet::new();
        for record in &parts.history {
            if record.iteration > parts.iteration {
                return bad(format!("history records future iteration {}", record.iteration));
            }
            for &f in &record.frames {
                if !queried.insert(f) {
                    return bad(format!("frame {f} queried twice"));
                }
                if !parts.labeled.contains(&f) && !parts.pending.contains(&f) {
                    return bad(format!("queried frame {f} is neither labeled nor pending"));
                }
            }
        }
        if let Some(f) = parts.pending.iter().find(|f| !queried.contains(f)) {
            return bad(format!("pending frame {f} was never queried"));
        }
        Ok(LoopState { parts })
    }

    pub fn parts(&self) -> &LoopParts {
        &self.parts
    }

    pub fn into_parts(self) -> LoopParts {
        self.parts
    }

    pub fn meta(&self) -> &VideoMeta {
        &self.parts.meta
    }

    pub fn iteration(&self) -> usize {
        self.parts.iteration
    }

    pub fn labeled(&self) -> &BTreeSet<usize> {
        &self.parts.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.parts.unlabeled
    }

    pub fn test(&self) -> &BTreeSet<usize> {
        &self.parts.test
    }

    pub fn pending(&self) -> &BTreeSet<usize> {
        &self.parts.pending
    }

    pub fn annotations(&self) -> &BTreeMap<usize, GroundTruthFrame> {
        &self.parts.annotations
    }

    pub fn history(&self) -> &[QueryRecord] {
        &self.parts.history
    }

    pub fn strategy(&self) -> &StrategyConfig {
        &self.parts.strategy
    }

    pub fn set_strategy(&mut self, strategy: StrategyConfig) -> Result<()> {
        strategy.validate()?;
        self.parts.strategy = strategy;
        Ok(())
    }

    /// Attaches an evaluation score to the most recent history entry.
    pub fn record_map(&mut self, map: f64) {
        if let Some(last) = self.parts.history.last_mut() {
            last.map = Some(map);
        }
    }

    /// Number of labeled frames at which the run stops.
    pub fn stop_target(&self) -> usize {
        let non_test = self.parts.meta.num_frames - self.parts.test.len();
        stop_target(self.parts.stop_fraction, non_test)
    }

    pub fn is_stopped(&self) -> bool {
        self.parts.pending.is_empty() && self.parts.labeled.len() >= self.stop_target()
    }

    /// Frames for which the next iteration needs model detections.
    pub fn detection_request(&self) -> Vec<usize> {
        let mut frames: BTreeSet<usize> = self.parts.unlabeled.clone();
        if self.parts.test_neighbors {
            frames.extend(&self.parts.test);
        }
        frames.into_iter().collect()
    }

    /// Scores the unlabeled pool and queries the next batch.
    ///
    /// The state is only modified when the whole iteration succeeds.
    pub fn run_iteration(
        &mut self,
        detections: &BTreeMap<usize, FrameDetections>,
    ) -> Result<IterationOutcome> {
        let p = &self.parts;
        if !p.pending.is_empty() {
            return Err(Error::BatchPending {
                iteration: p.iteration,
                pending: p.pending.len(),
            });
        }
        let target = self.stop_target();
        if p.labeled.len() >= target {
            return Err(Error::Stopped {
                labeled: p.labeled.len(),
                target,
            });
        }

        let k = p.meta.num_classes();
        for frame in self.detection_request() {
            let dets = detections.get(&frame).ok_or(Error::MissingDetections {
                frame,
                iteration: p.iteration,
            })?;
            if dets.frame_index != frame {
                return Err(Error::InvalidConfig(format!(
                    "detections keyed {frame} carry frame {}",
                    dets.frame_index
                )));
            }
            dets.check_classes(k)?;
        }

        let views = self.frame_views(detections);
        let curve = self.instance_curve()?;
        let labeled: Vec<usize> = p.labeled.iter().copied().collect();
        let weights = build_weight_curve(&labeled, p.meta.num_frames)?;

        let candidates: Vec<usize> = p.unlabeled.iter().copied().collect();
        let bundles = candidates
            .par_iter()
            .map(|&i| {
                let (prev, next) = self.neighbors(i, &views);
                let current = views[i].as_ref().expect("candidate frames have views");
                score_view(prev, current, next, &curve, &p.scoring)
            })
            .collect::<Result<Vec<FrameScoreBundle>>>()?;

        let mut config = p.strategy;
        config.batch_size = config.batch_size.min(target - p.labeled.len());
        config.rng_seed = derive_seed(config.rng_seed, p.iteration as u64);
        let selection = weighted_select(&bundles, &weights, &config, &p.unlabeled)?;

        let by_frame: BTreeMap<usize, f64> = selection
            .scores
            .iter()
            .map(|s| (s.index, s.weighted_score))
            .collect();
        let iteration = p.iteration;
        self.parts.history.push(QueryRecord {
            iteration,
            frames: selection.batch.clone(),
            weighted_scores: selection.batch.iter().map(|f| by_frame[f]).collect(),
            mu: selection.mu,
            map: None,
        });
        self.parts.pending = selection.batch.iter().copied().collect();

        Ok(IterationOutcome {
            iteration,
            batch: selection.batch,
            scores: selection.scores,
            mu: selection.mu,
            weights,
        })
    }

    /// Stores annotations for pending frames; a batch may arrive in pieces.
    pub fn ingest_annotations(&mut self, labels: &[GroundTruthFrame]) -> Result<IngestOutcome> {
        let k = self.parts.meta.num_classes();
        let mut incoming = BTreeSet::new();
        for gt in labels {
            let i = gt.frame_index;
            self.parts.meta.check_frame(i)?;
            if self.parts.labeled.contains(&i) || !incoming.insert(i) {
                return Err(Error::DuplicateAnnotation(i));
            }
            if !self.parts.pending.contains(&i) {
                return Err(Error::NotPending(i));
            }
            gt.validate(k)?;
        }

        for gt in labels {
            let i = gt.frame_index;
            self.parts.pending.remove(&i);
            self.parts.unlabeled.remove(&i);
            self.parts.labeled.insert(i);
            self.parts.annotations.insert(i, gt.clone());
        }
        let iteration_complete = self.parts.pending.is_empty() && !labels.is_empty();
        if iteration_complete {
            self.parts.iteration += 1;
        }
        Ok(IngestOutcome {
            accepted: incoming.into_iter().collect(),
            remaining: self.parts.pending.iter().copied().collect(),
            iteration_complete,
        })
    }

    /// Mini-batch plan for retraining on the latest fully annotated batch.
    pub fn training_directive(&self, seed: u64) -> Result<TrainingDirective> {
        const EPOCHS: usize = 10;
        const MINIBATCH: usize = 20;
        const LEARNING_RATE: f64 = 0.001;

        let latest = self
            .parts
            .history
            .iter()
            .rev()
            .find(|r| !r.frames.is_empty() && r.frames.iter().all(|f| self.parts.labeled.contains(f)))
            .ok_or(Error::NoCompletedBatch)?;
        let queried: BTreeSet<usize> = latest.frames.iter().copied().collect();
        let guiding: BTreeSet<usize> = self.parts.labeled.difference(&queried).copied().collect();
        let extra = MINIBATCH.saturating_sub(queried.len());

        let batches = (0..EPOCHS)
            .map(|epoch| {
                let sample =
                    crate::strategy::passive_sample(&guiding, extra, derive_seed(seed, epoch as u64));
                latest.frames.iter().copied().chain(sample).collect()
            })
            .collect();
        Ok(TrainingDirective {
            iteration: latest.iteration,
            epochs: EPOCHS,
            minibatch_size: MINIBATCH,
            learning_rate: LEARNING_RATE,
            queried: latest.frames.clone(),
            batches,
        })
    }

    /// Fits the instance curve to the annotated class counts.
    pub fn instance_curve(&self) -> Result<InstanceCurve> {
        let k = self.parts.meta.num_classes();
        let nodes: Vec<(usize, Vec<usize>)> = self
            .parts
            .annotations
            .iter()
            .map(|(&i, gt)| (i, gt.class_counts(k)))
            .collect();
        InstanceCurve::fit(&nodes, self.parts.meta.num_frames)
    }

    fn frame_views(&self, detections: &BTreeMap<usize, FrameDetections>) -> Vec<Option<FrameView>> {
        let p = &self.parts;
        let k = p.meta.num_classes();
        (0..p.meta.num_frames)
            .into_par_iter()
            .map(|i| {
                if let Some(gt) = p.annotations.get(&i) {
                    Some(FrameView::new(&gt.as_detections(k), &p.meta, &p.scoring))
                } else if p.test.contains(&i) && !p.test_neighbors {
                    None
                } else {
                    detections.get(&i).map(|d| FrameView::new(d, &p.meta, &p.scoring))
                }
            })
            .collect()
    }

    /// Nearest frame with a view on each side.
    fn neighbors<'a>(
        &self,
        i: usize,
        views: &'a [Option<FrameView>],
    ) -> (Option<&'a FrameView>, Option<&'a FrameView>) {
        let prev = views[..i].iter().rev().find_map(Option::as_ref);
        let next = views[i + 1..].iter().find_map(Option::as_ref);
        (prev, next)
    }
}

fn check_stop_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "stop fraction {fraction} outside (0, 1]"
        )));
    }
    Ok(())
}
