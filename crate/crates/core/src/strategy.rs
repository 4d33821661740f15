//! Query strategies: aggregation of the per-class signals into one score per
//! frame, the distance-to-annotation weight curve, and batch selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::FrameScoreBundle;

/// Lower bound on the dynamic balance parameter.
pub const MU_FLOOR: f64 = 1e-9;

pub const DEFAULT_BATCH_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Uniform random sampling of the unlabeled pool.
    Passive,
    /// Entropy only.
    ClassificationOnly,
    /// Inconsistency aggregation with μ recomputed every iteration.
    S1Dynamic,
    /// Inconsistency aggregation with a fixed μ.
    S1Fixed,
    /// Sum aggregation.
    S2,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Passive,
        StrategyKind::ClassificationOnly,
        StrategyKind::S1Dynamic,
        StrategyKind::S1Fixed,
        StrategyKind::S2,
    ];

    pub fn short_name(&self) -> &'static str {
        match self {
            StrategyKind::Passive => "p",
            StrategyKind::ClassificationOnly => "c",
            StrategyKind::S1Dynamic => "s1",
            StrategyKind::S1Fixed => "s1-fixed",
            StrategyKind::S2 => "s2",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" | "passive" => Ok(StrategyKind::Passive),
            "c" | "classification_only" => Ok(StrategyKind::ClassificationOnly),
            "s1" | "s1_dynamic" => Ok(StrategyKind::S1Dynamic),
            "s1-fixed" | "s1_fixed" => Ok(StrategyKind::S1Fixed),
            "s2" => Ok(StrategyKind::S2),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub fixed_mu: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyKind::S1Dynamic,
            fixed_mu: 1.0,
            batch_size: DEFAULT_BATCH_SIZE,
            rng_seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            ..StrategyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.fixed_mu > 0.0 && self.fixed_mu.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fixed mu must be positive, got {}",
                self.fixed_mu
            )));
        }
        Ok(())
    }
}

/// Mean localization uncertainty over mean classification uncertainty.
///
/// Each frame contributes its largest per-class value of each signal. A zero
/// classification mean gives μ = 1; the result is floored at [`MU_FLOOR`].
pub fn compute_mu(bundles: &[FrameScoreBundle]) -> Result<f64> {
    if bundles.is_empty() {
        return Err(Error::EmptyPool);
    }
    let n = bundles.len() as f64;
    let loc = bundles.iter().map(FrameScoreBundle::localization).sum::<f64>() / n;
    let cls = bundles.iter().map(FrameScoreBundle::classification).sum::<f64>() / n;
    Ok(mu_from_means(loc, cls))
}

pub fn mu_from_means(localization_mean: f64, classification_mean: f64) -> f64 {
    if classification_mean == 0.0 {
        1.0
    } else {
        (localization_mean / classification_mean).max(MU_FLOOR)
    }
}

/// Inconsistency aggregation `|max(ΔH′, Δn) − μ·C|`.
pub fn aggregate_s1(delta_h: f64, delta_n: f64, c: f64, mu: f64) -> f64 {
    (delta_h.max(delta_n) - mu * c).abs()
}

/// Sum aggregation `max(ΔH′, Δn) + C`.
pub fn aggregate_s2(delta_h: f64, delta_n: f64, c: f64) -> f64 {
    delta_h.max(delta_n) + c
}

/// Per-frame multiplier: 0 on annotated frames, rising linearly to 1 midway
/// between consecutive annotated frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightCurve(Vec<f64>);

impl WeightCurve {
    pub fn at(&self, frame: usize) -> f64 {
        self.0[frame]
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn build_weight_curve(guiding: &[usize], num_frames: usize) -> Result<WeightCurve> {
    let guiding: BTreeSet<usize> = guiding.iter().copied().collect();
    let (Some(&first), Some(&last)) = (guiding.first(), guiding.last()) else {
        return Err(Error::EmptyGuidingSet);
    };
    if last >= num_frames {
        return Err(Error::FrameOutOfRange {
            index: last,
            frames: num_frames,
        });
    }

    // ramp length beyond the outermost guiding frames
    let ramp = if guiding.len() > 1 {
        let mean_gap = (last - first) as f64 / (guiding.len() - 1) as f64;
        (mean_gap / 2.0).ceil().max(1.0)
    } else {
        ((num_frames - 1) as f64 / 2.0).ceil().max(1.0)
    };

    let mut w = vec![0.0; num_frames];
    for (i, slot) in w.iter_mut().enumerate().take(first) {
        *slot = ((first - i) as f64 / ramp).min(1.0);
    }
    for (i, slot) in w.iter_mut().enumerate().skip(last + 1) {
        *slot = ((i - last) as f64 / ramp).min(1.0);
    }
    let nodes: Vec<usize> = guiding.into_iter().collect();
    for pair in nodes.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let gap = (b - a) as f64;
        for (i, slot) in w.iter_mut().enumerate().take(b).skip(a + 1) {
            *slot = 2.0 * ((i - a).min(b - i)) as f64 / gap;
        }
    }
    Ok(WeightCurve(w))
}

/// Aggregated per-class score as written to the scores report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    #[serde(rename = "C")]
    pub c: f64,
    pub dn: f64,
    pub dh: f64,
    #[serde(rename = "S")]
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub index: usize,
    pub weight: f64,
    pub per_class: Vec<ClassScore>,
    pub frame_score: f64,
    pub weighted_score: f64,
}

/// Result of one selection round.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub batch: Vec<usize>,
    /// Scores for every candidate frame, ascending by index.
    pub scores: Vec<FrameScore>,
    /// Balance parameter used, for the S1 strategies.
    pub mu: Option<f64>,
}

/// Computes `S` and `Ŝ = S·w` for every bundle under the configured strategy.
pub fn score_frames(
    bundles: &[FrameScoreBundle],
    weights: &WeightCurve,
    config: &StrategyConfig,
) -> Result<(Vec<FrameScore>, Option<f64>)> {
    let mu = match config.kind {
        StrategyKind::S1Dynamic => Some(compute_mu(bundles)?),
        StrategyKind::S1Fixed => Some(config.fixed_mu),
        _ => None,
    };
    let scores = bundles
        .iter()
        .map(|b| {
            let (per_class, frame_score) = b.aggregate(|s| match config.kind {
                StrategyKind::Passive => 0.0,
                StrategyKind::ClassificationOnly => s.classification,
                StrategyKind::S1Dynamic | StrategyKind::S1Fixed => {
                    aggregate_s1(s.boxes, s.instance, s.classification, mu.unwrap_or(1.0))
                }
                StrategyKind::S2 => aggregate_s2(s.boxes, s.instance, s.classification),
            });
            let weight = weights.at(b.frame_index);
            FrameScore {
                index: b.frame_index,
                weight,
                per_class: b
                    .classes
                    .iter()
                    .zip(per_class)
                    .map(|(sig, s)| ClassScore {
                        c: sig.classification,
                        dn: sig.instance,
                        dh: sig.boxes,
                        s,
                    })
                    .collect(),
                frame_score,
                weighted_score: frame_score * weight,
            }
        })
        .collect();
    Ok((scores, mu))
}

/// The `k` highest-scoring frames; ties go to the lower frame index.
pub fn rank_top(scored: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = scored.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Seeded uniform sample of `k` pool members without replacement, ascending.
pub fn passive_sample(pool: &BTreeSet<usize>, k: usize, seed: u64) -> Vec<usize> {
    let members: Vec<usize> = pool.iter().copied().collect();
    let k = k.min(members.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, members.len(), k)
        .into_iter()
        .map(|i| members[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Selects the next query batch from `unlabeled`.
///
/// Bundles outside `unlabeled` are ignored; every unlabeled frame must have one.
pub fn weighted_select(
    bundles: &[FrameScoreBundle],
    weights: &WeightCurve,
    config: &StrategyConfig,
    unlabeled: &BTreeSet<usize>,
) -> Result<Selection> {
    config.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::EmptyPool);
    }
    let by_frame: BTreeMap<usize, &FrameScoreBundle> = bundles
        .iter()
        .filter(|b| unlabeled.contains(&b.frame_index))
        .map(|b| (b.frame_index, b))
        .collect();
    if let Some(&missing) = unlabeled.iter().find(|i| !by_frame.contains_key(i)) {
        return Err(Error::MissingDetections {
            frame: missing,
            iteration: 0,
        });
    }
    let pool: Vec<FrameScoreBundle> = by_frame.into_values().cloned().collect();
    let (scores, mu) = score_frames(&pool, weights, config)?;

    let batch = if config.kind == StrategyKind::Passive {
        passive_sample(unlabeled, config.batch_size, config.rng_seed)
    } else {
        let scored: Vec<(usize, f64)> = scores.iter().map(|s| (s.index, s.weighted_score)).collect();
        rank_top(&scored, config.batch_size)
    };
    Ok(Selection { batch, scores, mu })
}
