//! Measurement layer: attention concentration, positional gating and the
//! threshold-versus-magnitude decomposition of social proof.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{MetricRow, RunArtifact, Trajectory};
use crate::error::ConfigError;
use crate::feed::{ItemId, Rank};

/// Default detection criterion, in standard errors.
pub const DEFAULT_SE_MULTIPLE: f64 = 3.0;

/// Per-replication metrics written to the summary CSV, in column order.
pub const REGISTERED_METRICS: [&str; 4] = [
    "selections",
    "mean_selected_position",
    "top_3_share",
    "gini_item",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no selections to measure")]
    NoData,
    #[error("insufficient overlap: {0}")]
    InsufficientOverlap(String),
    #[error("unknown detector `{0}`")]
    UnknownDetector(String),
    #[error("detector `{0}` is part of the risk vocabulary but has no implementation")]
    UnimplementedDetector(String),
}

fn selections(trajectories: &[Trajectory]) -> impl Iterator<Item = (ItemId, Rank)> + '_ {
    trajectories
        .iter()
        .flat_map(|t| &t.events)
        .flat_map(|e| e.selections())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDistribution {
    pub by_item: Vec<u64>,
    /// `by_rank[r - 1]` counts selections made at displayed rank `r`.
    pub by_rank: Vec<u64>,
    pub total: u64,
}

impl AttentionDistribution {
    pub fn from_trajectories(trajectories: &[Trajectory], slate_size: usize) -> Self {
        let mut d = AttentionDistribution {
            by_item: vec![0; slate_size],
            by_rank: vec![0; slate_size],
            total: 0,
        };
        for (item, rank) in selections(trajectories) {
            d.by_item[item as usize] += 1;
            d.by_rank[rank as usize - 1] += 1;
            d.total += 1;
        }
        d
    }

    pub fn marginal(&self, axis: Axis) -> &[u64] {
        match axis {
            Axis::Item => &self.by_item,
            Axis::Rank => &self.by_rank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    #[default]
    Item,
    Rank,
}

pub fn mean_selected_position(trajectories: &[Trajectory]) -> Result<f64, MetricsError> {
    let (sum, n) = selections(trajectories).fold((0u64, 0u64), |(s, n), (_, r)| (s + r as u64, n + 1));
    if n == 0 {
        return Err(MetricsError::NoData);
    }
    Ok(sum as f64 / n as f64)
}

/// Fraction of selections made at displayed rank `<= k`.
pub fn top_k_share(trajectories: &[Trajectory], k: u32) -> Result<f64, MetricsError> {
    let (hits, n) = selections(trajectories).fold((0u64, 0u64), |(h, n), (_, r)| (h + (r <= k) as u64, n + 1));
    if n == 0 {
        return Err(MetricsError::NoData);
    }
    Ok(hits as f64 / n as f64)
}

/// Gini coefficient `Σᵢⱼ|xᵢ−xⱼ| / (2n²μ)`, computed from the sorted counts as
/// `Σᵢ (2i − n − 1)·x₍ᵢ₎ / (n·Σx)`.
pub fn gini_of(counts: &[u64]) -> Result<f64, MetricsError> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(MetricsError::NoData);
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as i64;
    let acc: i128 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (2 * (i as i64 + 1) - n - 1) as i128 * x as i128)
        .sum();
    Ok(acc as f64 / (n as f64 * total as f64))
}

pub fn gini(attention: &AttentionDistribution, axis: Axis) -> Result<f64, MetricsError> {
    gini_of(attention.marginal(axis))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEffectEstimate {
    /// Pooled within-rank difference in selection rate, count > 0 vs count = 0.
    pub delta_p: f64,
    pub delta_p_se: f64,
    /// Pooled within-rank slope of selection on visible count, count > 0 only.
    pub magnitude_slope: f64,
    pub magnitude_slope_se: f64,
    pub n_strata: usize,
    pub n_observations: usize,
}

#[derive(Default)]
struct Stratum {
    zero_n: u64,
    zero_hits: u64,
    /// `(visible_count, selected)` for positive counts.
    positive: Vec<(f64, f64)>,
}

/// Position-stratified estimate over every displayed slot with rank
/// `<= gate_hint` and a visible count. Strata are pooled only within the
/// same displayed rank:
///
/// * `delta_p` uses risk-difference weights `n0·n1 / (n0 + n1)`;
/// * `magnitude_slope` is the within-stratum least-squares slope
///   `ΣSxy / ΣSxx` with a heteroskedasticity-robust (HC0) error.
pub fn estimate_threshold_effect(
    trajectories: &[Trajectory],
    gate_hint: u32,
) -> Result<ThresholdEffectEstimate, MetricsError> {
    let mut strata: Vec<Stratum> = (0..gate_hint).map(|_| Stratum::default()).collect();
    let mut n_obs = 0usize;
    for e in trajectories.iter().flat_map(|t| &t.events) {
        for (i, (&item, count)) in e.order.iter().zip(&e.visible).enumerate().take(gate_hint as usize) {
            let Some(c) = *count else { continue };
            let selected = e.decision.contains(&item);
            let s = &mut strata[i];
            n_obs += 1;
            if c == 0 {
                s.zero_n += 1;
                s.zero_hits += selected as u64;
            } else {
                s.positive.push((c as f64, selected as u8 as f64));
            }
        }
    }
    if n_obs == 0 {
        return Err(MetricsError::InsufficientOverlap("no visible counts within the gate".into()));
    }
    if let Some(r) = strata.iter().position(|s| s.zero_n == 0 || s.positive.is_empty()) {
        return Err(MetricsError::InsufficientOverlap(format!(
            "rank {} lacks one of the count classes",
            r + 1
        )));
    }

    let (mut wsum, mut wdelta, mut wvar) = (0.0, 0.0, 0.0);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    let mut centered: Vec<Vec<(f64, f64)>> = Vec::with_capacity(strata.len());
    for s in &strata {
        let n0 = s.zero_n as f64;
        let n1 = s.positive.len() as f64;
        let p0 = s.zero_hits as f64 / n0;
        let p1 = s.positive.iter().map(|p| p.1).sum::<f64>() / n1;
        let w = n0 * n1 / (n0 + n1);
        let var = p1 * (1.0 - p1) / n1 + p0 * (1.0 - p0) / n0;
        wsum += w;
        wdelta += w * (p1 - p0);
        wvar += w * w * var;

        let mx = s.positive.iter().map(|p| p.0).sum::<f64>() / n1;
        let c: Vec<(f64, f64)> = s.positive.iter().map(|&(x, y)| (x - mx, y - p1)).collect();
        sxx += c.iter().map(|(dx, _)| dx * dx).sum::<f64>();
        sxy += c.iter().map(|(dx, dy)| dx * dy).sum::<f64>();
        centered.push(c);
    }
    if sxx == 0.0 {
        return Err(MetricsError::InsufficientOverlap(
            "positive visible counts never vary within a rank".into(),
        ));
    }
    let slope = sxy / sxx;
    let meat: f64 = centered
        .iter()
        .flatten()
        .map(|&(dx, dy)| {
            let resid = dy - slope * dx;
            dx * dx * resid * resid
        })
        .sum();
    Ok(ThresholdEffectEstimate {
        delta_p: wdelta / wsum,
        delta_p_se: wvar.sqrt() / wsum,
        magnitude_slope: slope,
        magnitude_slope_se: meat.sqrt() / sxx,
        n_strata: strata.len(),
        n_observations: n_obs,
    })
}

/// Registered detectors, addressed by `name` in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorSpec {
    /// Top-k share above the uniform-policy null by `se_multiple` standard errors.
    Herding {
        #[serde(default = "default_top_k")]
        top_k: u32,
        #[serde(default = "default_se_multiple")]
        se_multiple: f64,
    },
    /// Gini coefficient of the chosen marginal above `threshold`.
    Concentration {
        #[serde(default)]
        axis: Axis,
        threshold: f64,
    },
}

fn default_top_k() -> u32 {
    3
}

fn default_se_multiple() -> f64 {
    DEFAULT_SE_MULTIPLE
}

/// Risk vocabulary recognised by name but without a shipped detector.
pub const VOCABULARY_ONLY: [&str; 6] = [
    "collusion",
    "information_cascade",
    "manipulation",
    "coordination_failure",
    "polarization",
    "deception",
];

pub fn default_detectors() -> Vec<DetectorSpec> {
    vec![
        DetectorSpec::Herding {
            top_k: default_top_k(),
            se_multiple: DEFAULT_SE_MULTIPLE,
        },
        DetectorSpec::Concentration {
            axis: Axis::Item,
            threshold: 0.5,
        },
    ]
}

impl DetectorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorSpec::Herding { .. } => "herding",
            DetectorSpec::Concentration { .. } => "concentration",
        }
    }

    /// Looks a detector up by name with its default parameters.
    pub fn by_name(name: &str) -> Result<Self, MetricsError> {
        match name {
            "herding" => Ok(default_detectors().remove(0)),
            "concentration" => Ok(default_detectors().remove(1)),
            n if VOCABULARY_ONLY.contains(&n) => Err(MetricsError::UnimplementedDetector(n.into())),
            n => Err(MetricsError::UnknownDetector(n.into())),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match *self {
            DetectorSpec::Herding { top_k, se_multiple } => {
                let mut v = Vec::new();
                if top_k == 0 {
                    v.push("herding top_k must be positive".to_string());
                }
                if !(se_multiple > 0.0 && se_multiple.is_finite()) {
                    v.push("herding se_multiple must be positive".to_string());
                }
                ConfigError::from_violations(v)
            }
            DetectorSpec::Concentration { threshold, .. } => {
                if (0.0..1.0).contains(&threshold) {
                    Ok(())
                } else {
                    Err(ConfigError::new("concentration threshold must lie in [0, 1)"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub detector: String,
    /// Level in the micro/meso/macro vocabulary.
    pub level: String,
    pub detected: bool,
    /// Herding: z-score against the null. Concentration: the Gini value.
    pub effect_size: f64,
    pub statistic: f64,
    pub null_value: f64,
    pub criterion: f64,
}

pub fn detect_phenomenon(run: &RunArtifact, detector: &DetectorSpec) -> Result<DetectionReport, MetricsError> {
    let n = run.config.slate_size as usize;
    match *detector {
        DetectorSpec::Herding { top_k, se_multiple } => {
            let share = top_k_share(&run.trajectories, top_k)?;
            let selections = selections(&run.trajectories).count() as f64;
            let p0 = (top_k as usize).min(n) as f64 / n as f64;
            let se = (p0 * (1.0 - p0) / selections).sqrt();
            let z = if se > 0.0 { (share - p0) / se } else { 0.0 };
            Ok(DetectionReport {
                detector: detector.name().into(),
                level: "macro".into(),
                detected: z > se_multiple,
                effect_size: z,
                statistic: share,
                null_value: p0,
                criterion: se_multiple,
            })
        }
        DetectorSpec::Concentration { axis, threshold } => {
            let g = gini(&AttentionDistribution::from_trajectories(&run.trajectories, n), axis)?;
            Ok(DetectionReport {
                detector: detector.name().into(),
                level: "macro".into(),
                detected: g > threshold,
                effect_size: g,
                statistic: g,
                null_value: 0.0,
                criterion: threshold,
            })
        }
    }
}

pub fn detect_named(run: &RunArtifact, name: &str) -> Result<DetectionReport, MetricsError> {
    detect_phenomenon(run, &DetectorSpec::by_name(name)?)
}

pub(crate) fn summary_rows(condition: &str, t: &Trajectory) -> Vec<MetricRow> {
    let one = std::slice::from_ref(t);
    let n = t.ledger.counts().len();
    let values = [
        Some(selections(one).count() as f64),
        mean_selected_position(one).ok(),
        top_k_share(one, 3).ok(),
        gini(&AttentionDistribution::from_trajectories(one, n), Axis::Item).ok(),
    ];
    REGISTERED_METRICS
        .iter()
        .zip(values)
        .map(|(m, value)| MetricRow {
            condition: condition.to_string(),
            replication: t.replication,
            metric: m.to_string(),
            value,
        })
        .collect()
}
