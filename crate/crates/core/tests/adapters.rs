use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;

use vidal_core::detector::{
    fetch_detections, generate_ground_truth, AdapterRequest, AdapterSpec, DetectionRequest, DetectionSource,
    ExecSource, FileSource, HttpSource, LearningDecay, NoiseParams, NoiseProfile, SceneConfig,
    SyntheticDetector,
};
use vidal_core::formats::{to_json_bytes, DetectionsDocument};
use vidal_core::model::{BBox, ClassDistribution, Detection, FrameDetections, VideoMeta};
use vidal_core::Error;

fn meta() -> VideoMeta {
    VideoMeta::new(64, 48, 20, vec!["a".into(), "b".into()]).unwrap()
}

fn frames_for(indices: &[usize]) -> Vec<FrameDetections> {
    indices
        .iter()
        .map(|&i| FrameDetections {
            frame_index: i,
            detections: vec![Detection {
                bbox: BBox::new(10.0 + i as f64, 20.0, 6.0, 8.0).unwrap(),
                probs: ClassDistribution::new(vec![0.8, 0.2]).unwrap(),
            }],
        })
        .collect()
}

fn document(indices: &[usize]) -> Vec<u8> {
    to_json_bytes(&DetectionsDocument::from_frames(1, &frames_for(indices))).unwrap()
}

fn request<'a>(
    meta: &'a VideoMeta,
    frames: &'a [usize],
    labeled: &'a BTreeSet<usize>,
) -> DetectionRequest<'a> {
    DetectionRequest {
        iteration: 1,
        frames,
        labeled,
        meta,
        state_path: None,
    }
}

#[test]
fn file_adapter_replays_and_checks_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dets.json");
    std::fs::write(&path, document(&[2, 3, 4, 9])).unwrap();
    let meta = meta();
    let labeled = BTreeSet::new();
    let mut source = FileSource { path: path.clone() };

    let got = fetch_detections(&mut source, &request(&meta, &[2, 3, 4], &labeled)).unwrap();
    assert_eq!(got.keys().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
    assert_eq!(got[&3], frames_for(&[3])[0]);

    let err = fetch_detections(&mut source, &request(&meta, &[2, 5], &labeled)).unwrap_err();
    assert!(
        matches!(
            err,
            Error::MissingDetections {
                frame: 5,
                iteration: 1
            }
        ),
        "{err}"
    );

    let three = VideoMeta::new(64, 48, 20, vec!["a".into(), "b".into(), "c".into()]).unwrap();
    assert!(fetch_detections(&mut source, &request(&three, &[2], &labeled)).is_err());

    std::fs::write(
        &path,
        b"{\"schema\":\"vidal.detections.v1\",\"iteration\":1,\"frames\":[",
    )
    .unwrap();
    assert!(matches!(
        fetch_detections(&mut source, &request(&meta, &[2], &labeled)).unwrap_err(),
        Error::Json { .. }
    ));
}

#[test]
fn exec_adapter_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let workdir = dir.path().join("work");
    let canned = dir.path().join("canned.json");
    std::fs::write(&canned, document(&[1, 7])).unwrap();
    let meta = meta();
    let labeled = BTreeSet::from([0]);
    let state = dir.path().join("state.json");

    let mut source = ExecSource {
        command: format!(
            "cp request.json seen.json && cp '{}' detections.json",
            canned.display()
        ),
        workdir: workdir.clone(),
    };
    let mut req = request(&meta, &[1, 7], &labeled);
    req.state_path = Some(&state);
    let got = fetch_detections(&mut source, &req).unwrap();
    assert_eq!(got.len(), 2);
    let seen: AdapterRequest =
        serde_json::from_slice(&std::fs::read(workdir.join("seen.json")).unwrap()).unwrap();
    assert_eq!(
        seen,
        AdapterRequest {
            iteration: 1,
            frame_indices: vec![1, 7],
            state_path: Some(state.clone()),
        }
    );

    // a stale response from an earlier run must not be picked up
    let mut silent = ExecSource {
        command: "true".into(),
        workdir: workdir.clone(),
    };
    let err = fetch_detections(&mut silent, &req).unwrap_err();
    assert!(err.to_string().contains("did not write"), "{err}");

    let mut failing = ExecSource {
        command: "echo boom >&2; exit 4".into(),
        workdir,
    };
    let err = fetch_detections(&mut failing, &req).unwrap_err();
    assert!(matches!(err, Error::Adapter { iteration: 1, .. }));
    assert!(err.to_string().contains("boom"), "{err}");
}

/// Serves `responses` to successive connections and returns the request bodies.
fn serve(responses: Vec<(u16, Vec<u8>)>) -> (String, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/detect", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    if name.eq_ignore_ascii_case("content-length") {
                        length = value.trim().parse().unwrap();
                    }
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            bodies.push(String::from_utf8(buf).unwrap());
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            )
            .unwrap();
            stream.write_all(&body).unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn http_adapter_posts_the_frame_list() {
    let (url, handle) = serve(vec![
        (200, document(&[4, 5])),
        (500, b"{}".to_vec()),
        (200, b"not json".to_vec()),
    ]);
    let meta = meta();
    let labeled = BTreeSet::new();
    let mut source = HttpSource::new(url.clone());
    let spec: AdapterSpec = url.parse().unwrap();
    assert_eq!(spec, AdapterSpec::Http(url));

    let got = fetch_detections(&mut source, &request(&meta, &[4, 5], &labeled)).unwrap();
    assert_eq!(got[&5], frames_for(&[5])[0]);
    let err = fetch_detections(&mut source, &request(&meta, &[4, 5], &labeled)).unwrap_err();
    assert!(err.to_string().contains("500"), "{err}");
    assert!(matches!(
        fetch_detections(&mut source, &request(&meta, &[4], &labeled)).unwrap_err(),
        Error::Json { .. }
    ));

    let bodies = handle.join().unwrap();
    let first: AdapterRequest = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(first.iteration, 1);
    assert_eq!(first.frame_indices, vec![4, 5]);
}

#[test]
fn unreachable_endpoint_is_an_adapter_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/detect", listener.local_addr().unwrap());
    drop(listener);
    let meta = meta();
    let labeled = BTreeSet::new();
    let err = HttpSource::new(url)
        .fetch(&request(&meta, &[1], &labeled))
        .unwrap_err();
    assert!(matches!(err, Error::Adapter { .. }), "{err}");
}

#[test]
fn synthetic_source_is_deterministic() {
    let meta = VideoMeta::new(160, 120, 60, vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let gt = generate_ground_truth(&meta, &SceneConfig::default(), 4);
    let noise = NoiseParams {
        p_miss: 0.3,
        p_spurious: 1.0,
        jitter_sigma: 0.2,
        class_temperature: 0.8,
    };
    let build = |seed| {
        SyntheticDetector::new(
            meta.clone(),
            gt.clone(),
            NoiseProfile::uniform(60, noise),
            LearningDecay { d0: 8.0, floor: 0.0 },
            seed,
        )
        .unwrap()
    };
    let labeled = BTreeSet::from([0, 30]);
    let frames: Vec<usize> = (0..60).filter(|f| !labeled.contains(f)).collect();
    let req = request(&meta, &frames, &labeled);
    let a = fetch_detections(&mut build(9), &req).unwrap();
    let b = fetch_detections(&mut build(9), &req).unwrap();
    let c = fetch_detections(&mut build(10), &req).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // the same call twice on one instance also repeats
    let mut det = build(9);
    assert_eq!(det.fetch(&req).unwrap(), det.fetch(&req).unwrap());
    // byte-identical serialization
    assert_eq!(
        to_json_bytes(&DetectionsDocument::from_frames(1, a.values())).unwrap(),
        to_json_bytes(&DetectionsDocument::from_frames(1, b.values())).unwrap()
    );
}
