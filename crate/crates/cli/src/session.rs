//! Iteration plumbing shared by the CLI and the service: adapter setup,
//! sidecar files next to the state, and one query round.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use vidal_core::active_loop::LoopState;
use vidal_core::detector::{
    fetch_detections, AdapterSpec, DetectionRequest, DetectionSource, ExecSource, FileSource, HttpSource,
    LearningDecay, NoiseDocument, NoiseParams, NoiseProfile, SyntheticDetector,
};
use vidal_core::formats::{
    load_annotations, read_json, write_json_atomic, DetectionsDocument, ScoresReport, SCORES_SCHEMA,
};
use vidal_core::model::{FrameDetections, VideoMeta};

pub type BoxedSource = Box<dyn DetectionSource + Send>;

/// `run.json` → `run.<suffix>.json`, in the same directory.
fn sidecar(state_path: &Path, suffix: &str) -> PathBuf {
    let stem = state_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "state".into());
    state_path.with_file_name(format!("{stem}.{suffix}.json"))
}

/// Detections of the latest queried batch, used to prefill annotation.
pub fn predictions_path(state_path: &Path) -> PathBuf {
    sidecar(state_path, "predictions")
}

/// Scores report of the latest iteration.
pub fn scores_path(state_path: &Path) -> PathBuf {
    sidecar(state_path, "scores")
}

#[derive(Debug, Clone)]
pub struct AdapterOptions {
    pub spec: AdapterSpec,
    pub ground_truth: Option<PathBuf>,
    pub noise: Option<PathBuf>,
    pub detector_seed: u64,
    /// Working directory of the exec adapter.
    pub workdir: PathBuf,
}

pub fn synthetic_detector(
    meta: &VideoMeta,
    ground_truth: &Path,
    noise: Option<&Path>,
    seed: u64,
) -> anyhow::Result<SyntheticDetector> {
    let gt = load_annotations(ground_truth)?;
    let (profile, decay) = match noise {
        Some(path) => read_json::<NoiseDocument>(path)?
            .into_parts(meta.num_frames)
            .with_context(|| format!("noise profile {}", path.display()))?,
        None => (
            NoiseProfile::uniform(meta.num_frames, NoiseParams::ZERO),
            LearningDecay::NONE,
        ),
    };
    Ok(SyntheticDetector::new(meta.clone(), gt, profile, decay, seed)?)
}

pub fn build_source(options: &AdapterOptions, meta: &VideoMeta) -> anyhow::Result<BoxedSource> {
    Ok(match &options.spec {
        AdapterSpec::File(path) => Box::new(FileSource { path: path.clone() }),
        AdapterSpec::Exec(command) => Box::new(ExecSource {
            command: command.clone(),
            workdir: options.workdir.clone(),
        }),
        AdapterSpec::Http(url) => Box::new(HttpSource::new(url.clone())),
        AdapterSpec::Synthetic => {
            let Some(gt) = &options.ground_truth else {
                bail!("the synthetic adapter needs --gt");
            };
            Box::new(synthetic_detector(
                meta,
                gt,
                options.noise.as_deref(),
                options.detector_seed,
            )?)
        }
    })
}

pub struct IterationProducts {
    pub report: ScoresReport,
    /// Detections of the queried frames.
    pub predictions: BTreeMap<usize, FrameDetections>,
}

/// Fetches detections for the current request set and runs one query round.
/// `state` is left untouched on error.
pub fn iterate(
    state: &mut LoopState,
    source: &mut dyn DetectionSource,
    state_path: Option<&Path>,
) -> vidal_core::Result<IterationProducts> {
    let frames = state.detection_request();
    let request = DetectionRequest {
        iteration: state.iteration(),
        frames: &frames,
        labeled: state.labeled(),
        meta: state.meta(),
        state_path,
    };
    let mut detections = fetch_detections(source, &request)?;
    let strategy = state.strategy().kind;
    let outcome = state.run_iteration(&detections)?;
    let predictions = outcome
        .batch
        .iter()
        .filter_map(|i| detections.remove_entry(i))
        .collect();
    Ok(IterationProducts {
        report: ScoresReport {
            schema: SCORES_SCHEMA.to_string(),
            iteration: outcome.iteration,
            strategy: strategy.short_name().to_string(),
            mu: outcome.mu,
            query: outcome.batch,
            frames: outcome.scores,
        },
        predictions,
    })
}

/// Writes the sidecars first and the state last, so the state file never
/// points at a batch whose sidecars are missing.
pub fn save_iteration(
    state: &LoopState,
    state_path: &Path,
    products: &IterationProducts,
) -> vidal_core::Result<()> {
    write_json_atomic(
        &predictions_path(state_path),
        &DetectionsDocument::from_frames(products.report.iteration, products.predictions.values()),
    )?;
    write_json_atomic(&scores_path(state_path), &products.report)?;
    vidal_core::formats::persist_state(state, state_path)
}

pub fn load_predictions(state_path: &Path, k: usize) -> vidal_core::Result<BTreeMap<usize, FrameDetections>> {
    let path = predictions_path(state_path);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    read_json::<DetectionsDocument>(&path)?.into_frames(k)
}

pub fn load_scores(state_path: &Path) -> vidal_core::Result<Option<ScoresReport>> {
    let path = scores_path(state_path);
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}
