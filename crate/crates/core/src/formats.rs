//! JSON documents exchanged with detectors, annotators and the workbench.
//!
//! Every document carries a `schema` tag that is checked on read. Output is
//! deterministic: struct fields serialize in declaration order and all maps
//! are ordered.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::active_loop::{LoopParts, LoopState, QueryRecord};
use crate::error::{Error, Result};
use crate::model::{
    BBox, ClassDistribution, Detection, FrameDetections, GroundTruthFrame, GroundTruthObject, VideoMeta,
};
use crate::scoring::ScoringConfig;
use crate::strategy::{FrameScore, StrategyConfig};

pub const DETECTIONS_SCHEMA: &str = "vidal.detections.v1";
pub const ANNOTATIONS_SCHEMA: &str = "vidal.annotations.v1";
pub const STATE_SCHEMA: &str = "vidal.state.v1";
pub const SCORES_SCHEMA: &str = "vidal.scores.v1";

fn check_schema(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Schema {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub bbox: BBox,
    pub probs: ClassDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFrameRecord {
    pub index: usize,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsDocument {
    pub schema: String,
    pub iteration: usize,
    pub frames: Vec<DetectionFrameRecord>,
}

impl DetectionsDocument {
    pub fn from_frames<'a>(iteration: usize, frames: impl IntoIterator<Item = &'a FrameDetections>) -> Self {
        DetectionsDocument {
            schema: DETECTIONS_SCHEMA.to_string(),
            iteration,
            frames: frames
                .into_iter()
                .map(|f| DetectionFrameRecord {
                    index: f.frame_index,
                    detections: f
                        .detections
                        .iter()
                        .map(|d| DetectionRecord {
                            bbox: d.bbox,
                            probs: d.probs.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Validates the schema tag, frame uniqueness and class count.
    pub fn into_frames(self, k: usize) -> Result<BTreeMap<usize, FrameDetections>> {
        check_schema(&self.schema, DETECTIONS_SCHEMA)?;
        let mut out = BTreeMap::new();
        for record in self.frames {
            let frame = FrameDetections {
                frame_index: record.index,
                detections: record
                    .detections
                    .into_iter()
                    .map(|d| Detection {
                        bbox: d.bbox,
                        probs: d.probs,
                    })
                    .collect(),
            };
            frame.check_classes(k)?;
            if out.insert(record.index, frame).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "frame {} listed twice in detections document",
                    record.index
                )));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFrameRecord {
    pub index: usize,
    pub objects: Vec<ObjectRecord>,
}

impl AnnotationFrameRecord {
    pub fn into_ground_truth(self) -> GroundTruthFrame {
        GroundTruthFrame {
            frame_index: self.index,
            objects: self
                .objects
                .into_iter()
                .map(|o| GroundTruthObject {
                    bbox: o.bbox,
                    class: o.class,
                })
                .collect(),
        }
    }

    pub fn from_ground_truth(gt: &GroundTruthFrame) -> Self {
        AnnotationFrameRecord {
            index: gt.frame_index,
            objects: objects_of(gt),
        }
    }
}

fn objects_of(gt: &GroundTruthFrame) -> Vec<ObjectRecord> {
    gt.objects
        .iter()
        .map(|o| ObjectRecord {
            bbox: o.bbox,
            class: o.class,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationsDocument {
    pub schema: String,
    pub frames: Vec<AnnotationFrameRecord>,
}

impl AnnotationsDocument {
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a GroundTruthFrame>) -> Self {
        AnnotationsDocument {
            schema: ANNOTATIONS_SCHEMA.to_string(),
            frames: frames
                .into_iter()
                .map(AnnotationFrameRecord::from_ground_truth)
                .collect(),
        }
    }

    pub fn into_frames(self) -> Result<Vec<GroundTruthFrame>> {
        check_schema(&self.schema, ANNOTATIONS_SCHEMA)?;
        let mut seen = BTreeSet::new();
        self.frames
            .into_iter()
            .map(|f| {
                if !seen.insert(f.index) {
                    return Err(Error::DuplicateAnnotation(f.index));
                }
                Ok(f.into_ground_truth())
            })
            .collect()
    }
}

/// On-disk form of [`LoopState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDocument {
    pub schema: String,
    pub meta: VideoMeta,
    pub strategy: StrategyConfig,
    pub iteration: usize,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
    pub annotations: BTreeMap<usize, Vec<ObjectRecord>>,
    pub history: Vec<QueryRecord>,
    pub pending: Vec<usize>,
    pub stop_fraction: f64,
    pub scoring: ScoringConfig,
    pub test_neighbors: bool,
}

impl From<&LoopState> for StateDocument {
    fn from(state: &LoopState) -> Self {
        let p = state.parts();
        StateDocument {
            schema: STATE_SCHEMA.to_string(),
            meta: p.meta.clone(),
            strategy: p.strategy,
            iteration: p.iteration,
            labeled: p.labeled.iter().copied().collect(),
            unlabeled: p.unlabeled.iter().copied().collect(),
            test: p.test.iter().copied().collect(),
            annotations: p.annotations.iter().map(|(&i, gt)| (i, objects_of(gt))).collect(),
            history: p.history.clone(),
            pending: p.pending.iter().copied().collect(),
            stop_fraction: p.stop_fraction,
            scoring: p.scoring,
            test_neighbors: p.test_neighbors,
        }
    }
}

impl TryFrom<StateDocument> for LoopState {
    type Error = Error;

    fn try_from(doc: StateDocument) -> Result<Self> {
        check_schema(&doc.schema, STATE_SCHEMA)?;
        let set = |v: Vec<usize>, what: &str| -> Result<BTreeSet<usize>> {
            let n = v.len();
            let s: BTreeSet<usize> = v.into_iter().collect();
            if s.len() != n {
                return Err(Error::CorruptState(format!("duplicate entries in {what}")));
            }
            Ok(s)
        };
        LoopState::from_parts(LoopParts {
            meta: doc.meta,
            strategy: doc.strategy,
            scoring: doc.scoring,
            stop_fraction: doc.stop_fraction,
            test_neighbors: doc.test_neighbors,
            iteration: doc.iteration,
            labeled: set(doc.labeled, "labeled")?,
            unlabeled: set(doc.unlabeled, "unlabeled")?,
            test: set(doc.test, "test")?,
            pending: set(doc.pending, "pending")?,
            annotations: doc
                .annotations
                .into_iter()
                .map(|(i, objects)| (i, AnnotationFrameRecord { index: i, objects }.into_ground_truth()))
                .collect(),
            history: doc.history,
        })
    }
}

/// Scores and query for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresReport {
    pub schema: String,
    pub iteration: usize,
    pub strategy: String,
    pub mu: Option<f64>,
    pub query: Vec<usize>,
    pub frames: Vec<FrameScore>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json("serialize", e))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = to_json_bytes(value)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn persist_state(state: &LoopState, path: &Path) -> Result<()> {
    write_json_atomic(path, &StateDocument::from(state))
}

pub fn load_state(path: &Path) -> Result<LoopState> {
    let doc: StateDocument = read_json(path)?;
    LoopState::try_from(doc)
}

pub fn load_detections(path: &Path, k: usize) -> Result<BTreeMap<usize, FrameDetections>> {
    read_json::<DetectionsDocument>(path)?.into_frames(k)
}

pub fn load_annotations(path: &Path) -> Result<Vec<GroundTruthFrame>> {
    read_json::<AnnotationsDocument>(path)?.into_frames()
}
