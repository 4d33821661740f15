use std::path::PathBuf;

use anyhow::{bail, ensure};
use serde::{Deserialize, Serialize};
use vidal_core::active_loop::LoopSettings;
use vidal_core::detector::{AdapterSpec, NoiseDocument};
use vidal_core::eval::EvalConfig;
use vidal_core::model::VideoMeta;
use vidal_core::scoring::ScoringConfig;
use vidal_core::strategy::StrategyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Test-split draw.
    pub split: u64,
    /// Passive sampling and mini-batch plans.
    pub strategy: u64,
    /// Synthetic detector noise.
    pub detector: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            split: seed,
            strategy: seed,
            detector: seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

/// Everything that determines one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub meta: VideoMeta,
    pub strategy: StrategyConfig,
    pub eval: EvalConfig,
    pub scoring: ScoringConfig,
    pub adapter: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseDocument>,
    pub seeds: Seeds,
    pub init_count: usize,
    pub test_fraction: f64,
    pub stop_fraction: f64,
    pub paths: RunPaths,
}

impl RunConfig {
    /// Checks every component and that referenced input paths exist.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.meta.validate()?;
        self.strategy.validate()?;
        self.eval.validate()?;
        let adapter: AdapterSpec = self.adapter.parse()?;
        if let Some(noise) = &self.noise {
            noise.clone().into_parts(self.meta.num_frames)?;
        }
        ensure!(
            self.stop_fraction > 0.0 && self.stop_fraction <= 1.0,
            "stop fraction {} outside (0, 1]",
            self.stop_fraction
        );
        ensure!(
            (0.0..1.0).contains(&self.test_fraction),
            "test fraction {} outside [0, 1)",
            self.test_fraction
        );
        if adapter == AdapterSpec::Synthetic && self.paths.ground_truth.is_none() {
            bail!("the synthetic adapter needs a ground-truth path");
        }
        let inputs = [
            &self.paths.images,
            &self.paths.detections,
            &self.paths.ground_truth,
        ];
        for path in inputs.into_iter().flatten() {
            ensure!(path.exists(), "{} does not exist", path.display());
        }
        if let AdapterSpec::File(path) = adapter {
            ensure!(path.exists(), "{} does not exist", path.display());
        }
        Ok(())
    }

    pub fn loop_settings(&self) -> LoopSettings {
        let mut strategy = self.strategy;
        strategy.rng_seed = self.seeds.strategy;
        LoopSettings {
            init_count: self.init_count,
            test_fraction: self.test_fraction,
            split_seed: self.seeds.split,
            stop_fraction: self.stop_fraction,
            scoring: self.scoring,
            ..LoopSettings::new(self.meta.clone(), strategy)
        }
    }
}
