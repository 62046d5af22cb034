//! Comparison against reference traces and the three-part adequacy report.
//!
//! Reference trace CSV:
//!
//! ```text
//! condition,rank,visible_count,selected
//! hidden,1,,1
//! organic,2,5,0
//! ```
//!
//! `visible_count` is empty when the count was hidden; `selected` is 0 or 1.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Trajectory;
use crate::feed::Rank;
use crate::interventions::SensitivityReport;
use crate::metrics::{AttentionDistribution, DetectionReport};
use crate::rng::{lanes, split_stream};

pub const DEFAULT_RESAMPLES: u32 = 10_000;
pub const DEFAULT_PERMUTATION_SEED: u64 = 0x5eed;

/// Follow-up questions attached to a failed observational comparison.
pub const DIVERGENCE_PROMPTS: [&str; 3] = [
    "incomplete microspecification?",
    "poor calibration?",
    "confounded observation?",
];

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("reference trace: {0}")]
    Csv(String),
    #[error("descriptive adequacy requires at least one detector verdict")]
    MissingDescriptive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub condition: String,
    pub rank: Rank,
    pub visible_count: Option<u64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceTrace {
    pub rows: Vec<TraceRow>,
    pub provenance: String,
}

#[derive(Deserialize)]
struct RawRow {
    condition: String,
    rank: Rank,
    visible_count: String,
    selected: String,
}

impl ReferenceTrace {
    pub fn from_reader(reader: impl Read, provenance: impl Into<String>) -> Result<Self, ValidationError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| ValidationError::Csv(e.to_string()))?;
        if headers != vec!["condition", "rank", "visible_count", "selected"] {
            return Err(ValidationError::Csv(format!(
                "expected header `condition,rank,visible_count,selected`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<RawRow>().enumerate() {
            let line = i + 2;
            let raw = rec.map_err(|e| ValidationError::Csv(format!("line {line}: {e}")))?;
            if raw.rank == 0 {
                return Err(ValidationError::Csv(format!("line {line}: rank is 1-based")));
            }
            let visible_count = match raw.visible_count.as_str() {
                "" => None,
                s => Some(s.parse().map_err(|_| {
                    ValidationError::Csv(format!("line {line}: visible_count `{s}` is not a count"))
                })?),
            };
            let selected = match raw.selected.as_str() {
                "0" => false,
                "1" => true,
                s => return Err(ValidationError::Csv(format!("line {line}: selected must be 0 or 1, got `{s}`"))),
            };
            rows.push(TraceRow {
                condition: raw.condition,
                rank: raw.rank,
                visible_count,
                selected,
            });
        }
        Ok(ReferenceTrace {
            rows,
            provenance: provenance.into(),
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self, ValidationError> {
        let f = std::fs::File::open(path).map_err(|e| ValidationError::Csv(format!("{}: {e}", path.display())))?;
        Self::from_reader(f, path.display().to_string())
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<(), ValidationError> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| ValidationError::Csv(e.to_string());
        w.write_record(["condition", "rank", "visible_count", "selected"]).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.condition.clone(),
                r.rank.to_string(),
                r.visible_count.map(|c| c.to_string()).unwrap_or_default(),
                (r.selected as u8).to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| ValidationError::Csv(e.to_string()))
    }

    /// One row per displayed slot of every event.
    pub fn from_trajectories(trajectories: &[Trajectory], condition: &str) -> Self {
        let rows = trajectories
            .iter()
            .flat_map(|t| &t.events)
            .flat_map(|e| {
                e.order.iter().zip(&e.visible).enumerate().map(move |(i, (id, &c))| TraceRow {
                    condition: condition.to_string(),
                    rank: i as Rank + 1,
                    visible_count: c,
                    selected: e.decision.contains(id),
                })
            })
            .collect();
        ReferenceTrace {
            rows,
            provenance: "exported from simulation".to_string(),
        }
    }

    /// Histogram of selected ranks for `condition`, length `slate_size`.
    pub fn selected_rank_histogram(&self, condition: &str, slate_size: usize) -> Result<Vec<u64>, ValidationError> {
        let mut hist = vec![0u64; slate_size];
        let mut matched = false;
        for r in self.rows.iter().filter(|r| r.condition == condition) {
            matched = true;
            if r.rank as usize > slate_size {
                return Err(ValidationError::SchemaMismatch(format!(
                    "reference rank {} exceeds slate size {slate_size}",
                    r.rank
                )));
            }
            if r.selected {
                hist[r.rank as usize - 1] += 1;
            }
        }
        if !matched {
            return Err(ValidationError::SchemaMismatch(format!(
                "reference has no rows for condition `{condition}`"
            )));
        }
        Ok(hist)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Tvd,
    Ks,
}

impl std::str::FromStr for Statistic {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tvd" => Ok(Statistic::Tvd),
            "ks" => Ok(Statistic::Ks),
            _ => Err(format!("unknown statistic `{s}` (expected tvd or ks)")),
        }
    }
}

/// Total-variation distance between two histograms, as frequencies.
pub fn tvd(a: &[u64], b: &[u64]) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    0.5 * a.iter().zip(b).map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs()).sum::<f64>()
}

/// Two-sample Kolmogorov–Smirnov statistic for samples given as histograms
/// over the same ordered support.
pub fn ks(a: &[u64], b: &[u64]) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let (mut ca, mut cb, mut best) = (0u64, 0u64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ca += x;
        cb += y;
        best = best.max((ca as f64 / na - cb as f64 / nb).abs());
    }
    best
}

fn statistic_of(stat: Statistic, a: &[u64], b: &[u64]) -> f64 {
    match stat {
        Statistic::Tvd => tvd(a, b),
        Statistic::Ks => ks(a, b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PermutationTest {
    pub resamples: u32,
    pub seed: u64,
}

impl Default for PermutationTest {
    fn default() -> Self {
        PermutationTest {
            resamples: DEFAULT_RESAMPLES,
            seed: DEFAULT_PERMUTATION_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub condition: String,
    pub statistic: Statistic,
    pub value: f64,
    pub p_value: f64,
    pub n_sim: u64,
    pub n_ref: u64,
    pub resamples: u32,
}

/// Label-permutation p-value `(1 + #{T* >= T}) / (1 + R)`. Resample `i`
/// draws from its own stream, so the result is independent of threading.
fn permutation_p_value(stat: Statistic, a: &[u64], b: &[u64], observed: f64, test: PermutationTest) -> f64 {
    let pool: Vec<u32> = a
        .iter()
        .zip(b)
        .enumerate()
        .flat_map(|(bin, (&x, &y))| std::iter::repeat_n(bin as u32, (x + y) as usize))
        .collect();
    let na = a.iter().sum::<u64>() as usize;
    let bins = a.len();
    let one = |i: u32, buf: &mut Vec<u32>| -> bool {
        buf.clear();
        buf.extend_from_slice(&pool);
        let mut s = split_stream(test.seed, &[lanes::PERMUTATION_TEST, i as u64]);
        for j in 0..na {
            let k = j + s.below((buf.len() - j) as u64) as usize;
            buf.swap(j, k);
        }
        let mut ha = vec![0u64; bins];
        let mut hb = vec![0u64; bins];
        for &v in &buf[..na] {
            ha[v as usize] += 1;
        }
        for &v in &buf[na..] {
            hb[v as usize] += 1;
        }
        statistic_of(stat, &ha, &hb) >= observed - 1e-12
    };
    #[cfg(feature = "parallel")]
    let exceed = {
        use rayon::prelude::*;
        (0..test.resamples)
            .into_par_iter()
            .map_init(Vec::new, |buf, i| one(i, buf))
            .filter(|&x| x)
            .count()
    };
    #[cfg(not(feature = "parallel"))]
    let exceed = {
        let mut buf = Vec::new();
        (0..test.resamples).filter(|&i| one(i, &mut buf)).count()
    };
    (1 + exceed) as f64 / (1 + test.resamples) as f64
}

/// Compares simulated selected-rank frequencies with a reference trace for
/// one condition.
pub fn compare_distributions(
    sim: &AttentionDistribution,
    condition: &str,
    reference: &ReferenceTrace,
    statistic: Statistic,
    test: PermutationTest,
) -> Result<DistanceReport, ValidationError> {
    let slate_size = sim.by_rank.len();
    let ref_hist = reference.selected_rank_histogram(condition, slate_size)?;
    let n_ref: u64 = ref_hist.iter().sum();
    if sim.total == 0 || n_ref == 0 {
        return Err(ValidationError::SchemaMismatch("both sides need at least one selection".into()));
    }
    let value = statistic_of(statistic, &sim.by_rank, &ref_hist);
    let p_value = permutation_p_value(statistic, &sim.by_rank, &ref_hist, value, test);
    Ok(DistanceReport {
        condition: condition.to_string(),
        statistic,
        value,
        p_value,
        n_sim: sim.total,
        n_ref,
        resamples: test.resamples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartStatus {
    Pass,
    Fail,
    NotEvaluated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdequacyPart {
    pub status: PartStatus,
    pub question: String,
    pub details: Vec<String>,
    /// Open questions for the analyst; never resolved automatically.
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdequacyReport {
    pub condition: String,
    pub descriptive: AdequacyPart,
    pub explanatory: AdequacyPart,
    pub observational: AdequacyPart,
}

impl AdequacyReport {
    pub fn all_pass(&self) -> bool {
        [&self.descriptive, &self.explanatory, &self.observational]
            .iter()
            .all(|p| p.status == PartStatus::Pass)
    }

    pub fn render_text(&self) -> String {
        let mut out = format!("adequacy report: {}\n", self.condition);
        for (name, part) in [
            ("descriptive", &self.descriptive),
            ("explanatory", &self.explanatory),
            ("observational", &self.observational),
        ] {
            let status = match part.status {
                PartStatus::Pass => "PASS",
                PartStatus::Fail => "FAIL",
                PartStatus::NotEvaluated => "NOT EVALUATED",
            };
            let _ = writeln!(out, "\n[{status}] {name}: {}", part.question);
            for d in &part.details {
                let _ = writeln!(out, "  - {d}");
            }
            for p in &part.prompts {
                let _ = writeln!(out, "  ? {p}");
            }
        }
        out
    }
}

/// Observational comparison plus its configured pass threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison<'a> {
    pub report: &'a DistanceReport,
    pub max_distance: f64,
}

pub fn build_adequacy_report(
    condition: &str,
    detections: &[DetectionReport],
    sensitivity: Option<&SensitivityReport>,
    comparison: Option<Comparison<'_>>,
) -> Result<AdequacyReport, ValidationError> {
    if detections.is_empty() {
        return Err(ValidationError::MissingDescriptive);
    }
    let descriptive = AdequacyPart {
        status: if detections.iter().all(|d| d.detected) {
            PartStatus::Pass
        } else {
            PartStatus::Fail
        },
        question: "does the microspecification generate the target phenomenon?".into(),
        details: detections
            .iter()
            .map(|d| {
                format!(
                    "{} ({}): {} effect={:.4} statistic={:.4} null={:.4} criterion={}",
                    d.detector,
                    d.level,
                    if d.detected { "detected" } else { "not detected" },
                    d.effect_size,
                    d.statistic,
                    d.null_value,
                    d.criterion
                )
            })
            .collect(),
        prompts: Vec::new(),
    };

    let explanatory_q = "which interaction variables does the phenomenon depend on?".to_string();
    let explanatory = match sensitivity {
        Some(s) if !s.rows.is_empty() => {
            let status = if s.rows.iter().any(|r| r.destroys()) {
                PartStatus::Pass
            } else {
                PartStatus::Fail
            };
            let details = s
                .rows
                .iter()
                .map(|r| {
                    let verdict = if r.destroys() {
                        "destroys the phenomenon"
                    } else if r.change == 0.0 {
                        "inert"
                    } else {
                        "shifts the effect"
                    };
                    format!(
                        "{} / {}: {verdict} ({:.4} -> {:.4}, change {:+.4})",
                        r.dimension, r.detector, r.base_effect, r.perturbed_effect, r.change
                    )
                })
                .collect();
            AdequacyPart {
                status,
                question: explanatory_q,
                details,
                prompts: Vec::new(),
            }
        }
        _ => AdequacyPart {
            status: PartStatus::NotEvaluated,
            question: explanatory_q,
            details: vec!["no sensitivity analysis supplied".into()],
            prompts: Vec::new(),
        },
    };

    let observational_q = "does the generated pattern match reference data?".to_string();
    let observational = match comparison {
        Some(c) => {
            let pass = c.report.value <= c.max_distance;
            AdequacyPart {
                status: if pass { PartStatus::Pass } else { PartStatus::Fail },
                question: observational_q,
                details: vec![format!(
                    "{:?} distance {:.4} (threshold {}), permutation p = {:.4} over {} resamples, n_sim = {}, n_ref = {}",
                    c.report.statistic,
                    c.report.value,
                    c.max_distance,
                    c.report.p_value,
                    c.report.resamples,
                    c.report.n_sim,
                    c.report.n_ref
                )],
                prompts: if pass {
                    Vec::new()
                } else {
                    DIVERGENCE_PROMPTS.iter().map(|s| s.to_string()).collect()
                },
            }
        }
        None => AdequacyPart {
            status: PartStatus::NotEvaluated,
            question: observational_q,
            details: vec!["no reference trace supplied".into()],
            prompts: Vec::new(),
        },
    };

    Ok(AdequacyReport {
        condition: condition.to_string(),
        descriptive,
        explanatory,
        observational,
    })
}
