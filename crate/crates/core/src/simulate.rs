//! End-to-end runs against the synthetic detector: ground truth plays the
//! annotator, the learning-decay noise model plays the retrained detector,
//! and the held-out test frames are scored with mAP after every iteration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::active_loop::{LoopSettings, LoopState};
use crate::detector::SyntheticDetector;
use crate::error::Result;
use crate::eval::{mean_ap, EvalConfig};
use crate::model::GroundTruthFrame;

pub const SIMULATION_SCHEMA: &str = "vidal.simulation.v1";

/// Random stream reserved for test-frame evaluation, shared by every
/// iteration and strategy so mAP differences come from noise scale alone.
const EVAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub labeled: usize,
    pub queried: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// Mean weighted score over the scored pool.
    pub mean_weighted_score: f64,
    /// mAP on the test frames after training on this batch.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub schema: String,
    pub strategy: String,
    pub iterations: Vec<IterationRecord>,
    pub final_map: Option<f64>,
    pub stopped: bool,
}

/// Runs up to `max_iterations` query rounds (all of them until the stop
/// fraction when `None`). The guiding-set round is recorded as iteration 0.
pub fn run_simulation(
    detector: &SyntheticDetector,
    settings: LoopSettings,
    eval: &EvalConfig,
    max_iterations: Option<usize>,
) -> Result<(SimulationReport, LoopState)> {
    let strategy = settings.strategy.kind.to_string();
    let mut state = LoopState::initialize(settings)?;
    let mut records = Vec::new();

    let guiding: Vec<usize> = state.pending().iter().copied().collect();
    annotate(&mut state, detector, &guiding)?;
    let map = evaluate(&state, detector, eval)?;
    if let Some(v) = map {
        state.record_map(v);
    }
    records.push(IterationRecord {
        iteration: 0,
        labeled: state.labeled().len(),
        queried: guiding,
        mu: None,
        mean_weighted_score: 0.0,
        map,
    });

    let mut done = 0;
    while !state.is_stopped() && max_iterations.is_none_or(|n| done < n) {
        let request = state.detection_request();
        let detections = detector.detect(&request, state.labeled(), state.iteration() as u64);
        let outcome = state.run_iteration(&detections)?;
        annotate(&mut state, detector, &outcome.batch)?;
        let map = evaluate(&state, detector, eval)?;
        if let Some(v) = map {
            state.record_map(v);
        }
        let n = outcome.scores.len().max(1) as f64;
        records.push(IterationRecord {
            iteration: outcome.iteration,
            labeled: state.labeled().len(),
            queried: outcome.batch,
            mu: outcome.mu,
            mean_weighted_score: outcome.scores.iter().map(|s| s.weighted_score).sum::<f64>() / n,
            map,
        });
        done += 1;
    }

    let report = SimulationReport {
        schema: SIMULATION_SCHEMA.to_string(),
        strategy,
        final_map: records.last().and_then(|r| r.map),
        stopped: state.is_stopped(),
        iterations: records,
    };
    Ok((report, state))
}

fn annotate(state: &mut LoopState, detector: &SyntheticDetector, frames: &[usize]) -> Result<()> {
    let labels: Vec<GroundTruthFrame> = frames.iter().map(|&f| detector.ground_truth(f).clone()).collect();
    state.ingest_annotations(&labels)?;
    Ok(())
}

/// mAP of the simulated detector on the test frames, `None` without test frames
/// or test ground truth.
pub fn evaluate(state: &LoopState, detector: &SyntheticDetector, eval: &EvalConfig) -> Result<Option<f64>> {
    let test: Vec<usize> = state.test().iter().copied().collect();
    let gt: Vec<GroundTruthFrame> = test.iter().map(|&f| detector.ground_truth(f).clone()).collect();
    if gt.iter().all(|f| f.objects.is_empty()) {
        return Ok(None);
    }
    let predictions: BTreeMap<_, _> = detector.detect(&test, state.labeled(), EVAL_STREAM);
    let report = mean_ap(&predictions, &gt, state.meta().num_classes(), eval)?;
    Ok(Some(report.map))
}
