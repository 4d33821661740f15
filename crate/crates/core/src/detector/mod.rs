//! Sources of model detections for the unlabeled frames.
//!
//! A source realizes the detector call of each iteration. Besides the
//! in-process [`SyntheticDetector`], three adapters talk to external
//! trainers: a replayed detections file, an external command with a
//! file-based contract, and an HTTP endpoint.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{read_json, write_json_atomic, DetectionsDocument};
use crate::model::{FrameDetections, VideoMeta};

pub use synthetic::{
    effective_noise, generate_ground_truth, synthesize_detections, LearningDecay, NoiseDocument, NoiseParams,
    NoiseProfile, NoiseRange, SceneConfig, SyntheticDetector,
};

pub const REQUEST_FILE: &str = "request.json";
pub const RESPONSE_FILE: &str = "detections.json";

/// Everything a source may need to answer one iteration.
#[derive(Debug, Clone, Copy)]
pub struct DetectionRequest<'a> {
    pub iteration: usize,
    pub frames: &'a [usize],
    pub labeled: &'a BTreeSet<usize>,
    pub meta: &'a VideoMeta,
    pub state_path: Option<&'a Path>,
}

pub trait DetectionSource {
    fn fetch(&mut self, request: &DetectionRequest<'_>) -> Result<BTreeMap<usize, FrameDetections>>;
}

/// Body of the exec request file and of the HTTP request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRequest {
    pub iteration: usize,
    pub frame_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_path: Option<PathBuf>,
}

/// Adapter selection as written on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdapterSpec {
    File(PathBuf),
    Exec(String),
    Http(String),
    Synthetic,
}

impl std::str::FromStr for AdapterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            return Ok(AdapterSpec::Synthetic);
        }
        match s.split_once(':') {
            Some(("file", path)) if !path.is_empty() => Ok(AdapterSpec::File(path.into())),
            Some(("exec", cmd)) if !cmd.is_empty() => Ok(AdapterSpec::Exec(cmd.to_string())),
            Some(("http", rest)) if rest.starts_with("http://") || rest.starts_with("https://") => {
                Ok(AdapterSpec::Http(rest.to_string()))
            }
            Some(("http", _)) => Ok(AdapterSpec::Http(s.to_string())),
            _ => Err(Error::InvalidConfig(format!(
                "adapter must be file:PATH, exec:CMD, http:URL or synthetic, got {s:?}"
            ))),
        }
    }
}

/// Fetches detections and checks they cover exactly the requested frames.
pub fn fetch_detections(
    source: &mut dyn DetectionSource,
    request: &DetectionRequest<'_>,
) -> Result<BTreeMap<usize, FrameDetections>> {
    let mut got = source.fetch(request)?;
    let k = request.meta.num_classes();
    let mut out = BTreeMap::new();
    for &frame in request.frames {
        let dets = got.remove(&frame).ok_or(Error::MissingDetections {
            frame,
            iteration: request.iteration,
        })?;
        dets.check_classes(k).map_err(|e| Error::Adapter {
            iteration: request.iteration,
            detail: e.to_string(),
        })?;
        out.insert(frame, dets);
    }
    Ok(out)
}

/// Replays a detections document from disk.
#[derive(Debug, Clone)]
pub struct FileSource {
    pub path: PathBuf,
}

impl DetectionSource for FileSource {
    fn fetch(&mut self, request: &DetectionRequest<'_>) -> Result<BTreeMap<usize, FrameDetections>> {
        read_json::<DetectionsDocument>(&self.path)?.into_frames(request.meta.num_classes())
    }
}

/// Runs `sh -c COMMAND` in a working directory holding `request.json`,
/// then reads `detections.json` back from the same directory.
#[derive(Debug, Clone)]
pub struct ExecSource {
    pub command: String,
    pub workdir: PathBuf,
}

impl DetectionSource for ExecSource {
    fn fetch(&mut self, request: &DetectionRequest<'_>) -> Result<BTreeMap<usize, FrameDetections>> {
        let fail = |detail: String| Error::Adapter {
            iteration: request.iteration,
            detail,
        };
        std::fs::create_dir_all(&self.workdir).map_err(|e| Error::io(&self.workdir, e))?;
        let response = self.workdir.join(RESPONSE_FILE);
        if response.exists() {
            std::fs::remove_file(&response).map_err(|e| Error::io(&response, e))?;
        }
        write_json_atomic(
            &self.workdir.join(REQUEST_FILE),
            &AdapterRequest {
                iteration: request.iteration,
                frame_indices: request.frames.to_vec(),
                state_path: request.state_path.map(Path::to_path_buf),
            },
        )?;
        let output = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .current_dir(&self.workdir)
            .output()
            .map_err(|e| fail(format!("cannot spawn {:?}: {e}", self.command)))?;
        if !output.status.success() {
            return Err(fail(format!(
                "{:?} exited with {}: {}",
                self.command,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        if !response.exists() {
            return Err(fail(format!("{:?} did not write {RESPONSE_FILE}", self.command)));
        }
        read_json::<DetectionsDocument>(&response)?.into_frames(request.meta.num_classes())
    }
}

/// POSTs the request to a remote detector and parses its detections document.
#[derive(Debug, Clone)]
pub struct HttpSource {
    pub url: String,
    pub timeout: Duration,
}

impl HttpSource {
    pub fn new(url: impl Into<String>) -> Self {
        HttpSource {
            url: url.into(),
            timeout: Duration::from_secs(600),
        }
    }
}

impl DetectionSource for HttpSource {
    fn fetch(&mut self, request: &DetectionRequest<'_>) -> Result<BTreeMap<usize, FrameDetections>> {
        let fail = |detail: String| Error::Adapter {
            iteration: request.iteration,
            detail,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| fail(e.to_string()))?;
        let body = AdapterRequest {
            iteration: request.iteration,
            frame_indices: request.frames.to_vec(),
            state_path: None,
        };
        let response = client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| fail(format!("{}: {e}", self.url)))?;
        let status = response.status();
        if !status.is_success() {
            return Err(fail(format!("{} answered {status}", self.url)));
        }
        let bytes = response.bytes().map_err(|e| fail(e.to_string()))?;
        let doc: DetectionsDocument = serde_json::from_slice(&bytes)
            .map_err(|e| Error::json(format!("response from {}", self.url), e))?;
        doc.into_frames(request.meta.num_classes())
    }
}
