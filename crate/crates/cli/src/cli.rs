use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vidal_core::active_loop::{LoopSettings, LoopState};
use vidal_core::detector::{
    generate_ground_truth, AdapterSpec, LearningDecay, NoiseDocument, NoiseParams, NoiseProfile, SceneConfig,
};
use vidal_core::eval::{mean_ap, parse_thresholds, EvalConfig};
use vidal_core::formats::{
    load_annotations, load_detections, load_state, persist_state, read_json, to_json_bytes,
    write_json_atomic, AnnotationsDocument,
};
use vidal_core::model::VideoMeta;
use vidal_core::scoring::ScoringConfig;
use vidal_core::simulate::{run_simulation, SimulationReport};
use vidal_core::strategy::{StrategyConfig, StrategyKind};

use crate::config::{RunConfig, RunPaths, Seeds};
use crate::server::{self, Service};
use crate::session::{self, AdapterOptions};

#[derive(Debug, Parser)]
#[command(name = "vidal", version, about = "Active learning for video object detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a state file with the guiding set pending annotation.
    Init(InitArgs),
    /// Score the unlabeled pool and query the next batch.
    Iterate(IterateArgs),
    /// Ingest annotations for pending frames.
    Annotate(AnnotateArgs),
    /// Print the retraining plan for the latest annotated batch.
    Directive(DirectiveArgs),
    /// Run the whole loop against the synthetic detector.
    Simulate(SimulateArgs),
    /// Compute mAP of a detections file against ground truth.
    Eval(EvalArgs),
    /// Serve the annotation workbench API.
    Serve(ServeArgs),
    /// Generate a synthetic ground-truth video.
    GenGt(GenGtArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub frames: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub height: usize,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub init_count: usize,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0.8)]
    pub stop_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pub confidence_threshold: f64,
    #[arg(long, default_value = "s1")]
    pub strategy: StrategyKind,
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub state: PathBuf,
    /// Overwrite an existing state file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AdapterArgs {
    /// Replay this detections file.
    #[arg(long, conflicts_with = "adapter")]
    pub detections: Option<PathBuf>,
    /// exec:CMD, http:URL (or a bare http:// URL) or synthetic.
    #[arg(long)]
    pub adapter: Option<String>,
    /// Ground truth for the synthetic adapter.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Noise profile for the synthetic adapter (zero noise when absent).
    #[arg(long)]
    pub noise: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub detector_seed: u64,
    /// Working directory of the exec adapter (default: next to the state file).
    #[arg(long)]
    pub workdir: Option<PathBuf>,
}

impl AdapterArgs {
    fn options(&self, state_path: &Path) -> anyhow::Result<Option<AdapterOptions>> {
        let spec = match (&self.detections, &self.adapter) {
            (Some(path), _) => AdapterSpec::File(path.clone()),
            (None, Some(text)) => text.parse()?,
            (None, None) => return Ok(None),
        };
        let workdir = self.workdir.clone().unwrap_or_else(|| {
            state_path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .join("adapter")
        });
        Ok(Some(AdapterOptions {
            spec,
            ground_truth: self.gt.clone(),
            noise: self.noise.clone(),
            detector_seed: self.detector_seed,
            workdir,
        }))
    }
}

#[derive(Debug, Args)]
pub struct IterateArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[command(flatten)]
    pub adapter: AdapterArgs,
    /// p, c, s1, s1-fixed or s2 (default: keep the state's strategy).
    #[arg(long)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Write the scores report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Ignore frames of the document that are not pending.
    #[arg(long)]
    pub pending_only: bool,
}

#[derive(Debug, Args)]
pub struct DirectiveArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Annotations document covering every frame.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub noise: Option<PathBuf>,
    #[arg(long)]
    pub strategy: StrategyKind,
    /// Query rounds after the guiding set (default: until the stop fraction).
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, default_value_t = 240)]
    pub height: usize,
    /// Comma-separated class names (default: c0..c{k-1} from the ground truth).
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub init_count: usize,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0.8)]
    pub stop_fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, default_value = "0.5:0.05:0.95")]
    pub thresholds: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long, default_value = "0.5:0.05:0.95")]
    pub thresholds: String,
    /// Number of classes (default: inferred from the inputs).
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[command(flatten)]
    pub adapter: AdapterArgs,
}

#[derive(Debug, Args)]
pub struct GenGtArgs {
    #[arg(long)]
    pub frames: usize,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, default_value_t = 240)]
    pub height: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 4)]
    pub tracks: usize,
    #[arg(long, default_value_t = 0.5)]
    pub churn: f64,
    #[arg(long, default_value_t = 2.0)]
    pub max_speed: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a noise profile: calm noise everywhere except the --noisy ranges.
    #[arg(long)]
    pub noise_out: Option<PathBuf>,
    /// Inclusive frame ranges START-END with heavy noise, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub noisy: Vec<String>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Init(a) => init(a),
        Command::Iterate(a) => iterate(a),
        Command::Annotate(a) => annotate(a),
        Command::Directive(a) => directive(a),
        Command::Simulate(a) => simulate(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
        Command::GenGt(a) => gen_gt(a),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => write_json_atomic(path, value)?,
        None => std::io::stdout().lock().write_all(&to_json_bytes(value)?)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct QueryList<'a> {
    iteration: usize,
    query: &'a [usize],
}

fn init(a: InitArgs) -> anyhow::Result<()> {
    ensure!(
        a.force || !a.state.exists(),
        "{} exists (use --force to overwrite)",
        a.state.display()
    );
    let meta = VideoMeta::new(a.width, a.height, a.frames, a.classes)?;
    let strategy = StrategyConfig {
        kind: a.strategy,
        fixed_mu: a.mu,
        batch_size: a.batch,
        rng_seed: a.seed,
    };
    let settings = LoopSettings {
        init_count: a.init_count,
        test_fraction: a.test_fraction,
        split_seed: a.seed,
        stop_fraction: a.stop_fraction,
        scoring: ScoringConfig {
            confidence_threshold: a.confidence_threshold,
            ..ScoringConfig::default()
        },
        ..LoopSettings::new(meta, strategy)
    };
    let state = LoopState::initialize(settings)?;
    persist_state(&state, &a.state)?;
    let query: Vec<usize> = state.pending().iter().copied().collect();
    emit(
        &QueryList {
            iteration: 0,
            query: &query,
        },
        None,
    )
}

fn iterate(a: IterateArgs) -> anyhow::Result<()> {
    let mut state = load_state(&a.state)?;
    let Some(options) = a.adapter.options(&a.state)? else {
        bail!("give --detections PATH or --adapter exec:CMD|http:URL|synthetic");
    };
    let mut strategy = *state.strategy();
    if let Some(kind) = a.strategy {
        strategy.kind = kind;
    }
    if let Some(mu) = a.mu {
        strategy.fixed_mu = mu;
    }
    if let Some(batch) = a.batch {
        strategy.batch_size = batch;
    }
    state.set_strategy(strategy)?;
    let mut source = session::build_source(&options, state.meta())?;
    let products = session::iterate(&mut state, source.as_mut(), Some(&a.state))?;
    session::save_iteration(&state, &a.state, &products)?;
    match &a.report {
        Some(path) => {
            write_json_atomic(path, &products.report)?;
            emit(
                &QueryList {
                    iteration: products.report.iteration,
                    query: &products.report.query,
                },
                None,
            )
        }
        None => emit(&products.report, None),
    }
}

fn annotate(a: AnnotateArgs) -> anyhow::Result<()> {
    let mut state = load_state(&a.state)?;
    let mut labels = load_annotations(&a.annotations)?;
    if a.pending_only {
        labels.retain(|f| state.pending().contains(&f.frame_index));
    }
    let outcome = state.ingest_annotations(&labels)?;
    persist_state(&state, &a.state)?;
    emit(&outcome, None)
}

fn directive(a: DirectiveArgs) -> anyhow::Result<()> {
    let state = load_state(&a.state)?;
    emit(&state.training_directive(a.seed)?, a.out.as_deref())
}

#[derive(Serialize)]
struct SimulationOutput<'a> {
    config: &'a RunConfig,
    #[serde(flatten)]
    report: &'a SimulationReport,
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let gt = load_annotations(&a.gt)?;
    let m = gt.len();
    let k = gt
        .iter()
        .flat_map(|f| f.objects.iter().map(|o| o.class + 1))
        .max()
        .unwrap_or(0)
        .max(a.classes.len());
    let classes = if a.classes.is_empty() {
        (0..k.max(2)).map(|c| format!("c{c}")).collect()
    } else {
        a.classes.clone()
    };
    let meta = VideoMeta::new(a.width, a.height, m, classes)?;
    let noise = match &a.noise {
        Some(path) => read_json::<NoiseDocument>(path)?,
        None => NoiseDocument::new(&NoiseProfile::uniform(m, NoiseParams::ZERO), LearningDecay::NONE),
    };
    let config = RunConfig {
        meta: meta.clone(),
        strategy: StrategyConfig {
            kind: a.strategy,
            fixed_mu: a.mu,
            batch_size: a.batch,
            rng_seed: a.seed,
        },
        eval: EvalConfig::with_thresholds(parse_thresholds(&a.thresholds)?)?,
        scoring: ScoringConfig::default(),
        adapter: "synthetic".into(),
        noise: Some(noise.clone()),
        seeds: Seeds::all(a.seed),
        init_count: a.init_count,
        test_fraction: a.test_fraction,
        stop_fraction: a.stop_fraction,
        paths: RunPaths {
            ground_truth: Some(a.gt.clone()),
            ..RunPaths::default()
        },
    };
    config.validate()?;
    let (profile, decay) = noise.into_parts(m)?;
    let detector =
        vidal_core::detector::SyntheticDetector::new(meta, gt, profile, decay, config.seeds.detector)
            .with_context(|| format!("ground truth {}", a.gt.display()))?;
    let (report, _) = run_simulation(&detector, config.loop_settings(), &config.eval, a.iterations)?;
    write_json_atomic(
        &a.report,
        &SimulationOutput {
            config: &config,
            report: &report,
        },
    )?;
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let gt = load_annotations(&a.gt)?;
    let k = match a.classes {
        Some(k) => k,
        None => {
            let doc: vidal_core::formats::DetectionsDocument = read_json(&a.detections)?;
            let from_dets = doc
                .frames
                .iter()
                .flat_map(|f| f.detections.iter().map(|d| d.probs.len()))
                .max();
            let from_gt = gt
                .iter()
                .flat_map(|f| f.objects.iter().map(|o| o.class + 1))
                .max();
            from_dets.or(from_gt).context("cannot infer the class count")?
        }
    };
    let predictions = load_detections(&a.detections, k)?;
    let config = EvalConfig::with_thresholds(parse_thresholds(&a.thresholds)?)?;
    emit(&mean_ap(&predictions, &gt, k, &config)?, a.out.as_deref())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    ensure!(a.images.is_dir(), "{} is not a directory", a.images.display());
    let meta = load_state(&a.state)?.meta().clone();
    let source = match a.adapter.options(&a.state)? {
        Some(options) => Some(session::build_source(&options, &meta)?),
        None => None,
    };
    let service = Arc::new(Service::open(&a.state, &a.images, source)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(server::serve(service, SocketAddr::new(a.host, a.port)))
}

fn gen_gt(a: GenGtArgs) -> anyhow::Result<()> {
    let meta = VideoMeta::new(a.width, a.height, a.frames, a.classes)?;
    let scene = SceneConfig {
        tracks: a.tracks,
        churn: a.churn,
        max_speed: a.max_speed,
        ..SceneConfig::default()
    };
    let gt = generate_ground_truth(&meta, &scene, a.seed);
    write_json_atomic(&a.out, &AnnotationsDocument::from_frames(&gt))?;
    if let Some(path) = &a.noise_out {
        let calm = NoiseParams {
            p_miss: 0.05,
            p_spurious: 0.1,
            jitter_sigma: 0.03,
            class_temperature: 0.1,
        };
        let noisy = NoiseParams {
            p_miss: 0.4,
            p_spurious: 1.5,
            jitter_sigma: 0.3,
            class_temperature: 1.0,
        };
        let segments = a
            .noisy
            .iter()
            .map(|r| {
                let (s, e) = r
                    .split_once('-')
                    .with_context(|| format!("noisy range {r:?} is not START-END"))?;
                Ok((s.trim().parse()?, e.trim().parse::<usize>()? + 1, noisy))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let profile = NoiseProfile::with_segments(a.frames, calm, &segments)?;
        write_json_atomic(
            path,
            &NoiseDocument::new(
                &profile,
                LearningDecay {
                    d0: 15.0,
                    floor: 0.05,
                },
            ),
        )?;
    }
    Ok(())
}
