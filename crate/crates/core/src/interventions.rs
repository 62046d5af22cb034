//! Architectural interventions plus paired-run analyses.
//!
//! Ranking interventions (pins) rewrite the presentation order before the
//! slate is rendered. Display interventions (masks, caps) rewrite what an
//! agent sees afterwards. Both kinds apply in declared list order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::architecture::Dimension;
use crate::engine::{run_experiment, ExperimentConfig, RunArtifact};
use crate::error::{ConfigError, Error};
use crate::feed::{ItemId, ObservedSlate, Permutation, Rank};
use crate::metrics::{detect_phenomenon, DetectorSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterventionError {
    #[error("slot {0} pinned twice")]
    DuplicateSlot(Rank),
    #[error("item {0} pinned twice")]
    DuplicateItem(ItemId),
    #[error("unknown item id {0}")]
    UnknownItem(ItemId),
    #[error("slot {slot} outside slate of {len}")]
    SlotOutOfRange { slot: Rank, len: usize },
    #[error("runs are not paired: {0}")]
    ConfigMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pin {
    pub item: ItemId,
    /// 1-based displayed slot.
    pub slot: Rank,
}

/// Half-open `[start, end)`; `end = None` means until the episode ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRange {
    pub start: u32,
    #[serde(default)]
    pub end: Option<u32>,
}

impl RoundRange {
    pub fn contains(&self, round: u32) -> bool {
        round >= self.start && self.end.is_none_or(|e| round < e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Intervention {
    PinRanking {
        pins: Vec<Pin>,
        #[serde(default)]
        active_rounds: RoundRange,
    },
    MaskSignals {
        items: Vec<ItemId>,
        #[serde(default)]
        active_rounds: RoundRange,
    },
    CapMagnitude {
        cap: u64,
        #[serde(default)]
        active_rounds: RoundRange,
    },
}

impl Intervention {
    pub fn pin(pins: Vec<Pin>) -> Self {
        Intervention::PinRanking {
            pins,
            active_rounds: RoundRange::default(),
        }
    }

    pub fn mask(items: Vec<ItemId>) -> Self {
        Intervention::MaskSignals {
            items,
            active_rounds: RoundRange::default(),
        }
    }

    pub fn cap(cap: u64) -> Self {
        Intervention::CapMagnitude {
            cap,
            active_rounds: RoundRange::default(),
        }
    }

    pub fn active_rounds(&self) -> RoundRange {
        match self {
            Intervention::PinRanking { active_rounds, .. }
            | Intervention::MaskSignals { active_rounds, .. }
            | Intervention::CapMagnitude { active_rounds, .. } => *active_rounds,
        }
    }

    pub fn validate(&self, slate_size: usize) -> Result<(), InterventionError> {
        match self {
            Intervention::PinRanking { pins, .. } => {
                check_pins(pins, slate_size).map(|_| ())
            }
            Intervention::MaskSignals { items, .. } => match items.iter().find(|&&i| i as usize >= slate_size) {
                Some(&i) => Err(InterventionError::UnknownItem(i)),
                None => Ok(()),
            },
            Intervention::CapMagnitude { .. } => Ok(()),
        }
    }
}

pub fn validate_interventions(list: &[Intervention], slate_size: usize) -> Result<(), ConfigError> {
    let v: Vec<String> = list
        .iter()
        .enumerate()
        .filter_map(|(i, iv)| iv.validate(slate_size).err().map(|e| format!("interventions[{i}]: {e}")))
        .collect();
    ConfigError::from_violations(v)
}

fn check_pins(pins: &[Pin], len: usize) -> Result<(), InterventionError> {
    let mut slots = vec![false; len];
    let mut items = vec![false; len];
    for p in pins {
        if p.item as usize >= len {
            return Err(InterventionError::UnknownItem(p.item));
        }
        if p.slot == 0 || p.slot as usize > len {
            return Err(InterventionError::SlotOutOfRange { slot: p.slot, len });
        }
        if std::mem::replace(&mut slots[p.slot as usize - 1], true) {
            return Err(InterventionError::DuplicateSlot(p.slot));
        }
        if std::mem::replace(&mut items[p.item as usize], true) {
            return Err(InterventionError::DuplicateItem(p.item));
        }
    }
    Ok(())
}

/// Places each pinned item at its slot; unpinned items fill the remaining
/// slots in their existing relative order.
pub fn apply_pin(permutation: &Permutation, pins: &[Pin]) -> Result<Permutation, InterventionError> {
    let len = permutation.len();
    check_pins(pins, len)?;
    if pins.is_empty() {
        return Ok(permutation.clone());
    }
    let mut slots: Vec<Option<ItemId>> = vec![None; len];
    let mut pinned = vec![false; len];
    for p in pins {
        slots[p.slot as usize - 1] = Some(p.item);
        pinned[p.item as usize] = true;
    }
    let mut rest = permutation.order().iter().filter(|&&id| !pinned[id as usize]);
    let order = slots
        .into_iter()
        .map(|s| s.unwrap_or_else(|| *rest.next().expect("slot count matches")))
        .collect();
    Ok(Permutation::from_order(order).expect("pinning preserves bijectivity"))
}

pub fn apply_mask(slate: &ObservedSlate, masked: &[ItemId]) -> Result<ObservedSlate, InterventionError> {
    if let Some(&bad) = masked.iter().find(|&&id| slate.entry_for(id).is_none()) {
        return Err(InterventionError::UnknownItem(bad));
    }
    let mut out = slate.clone();
    for e in &mut out.entries {
        if masked.contains(&e.item_id) {
            e.visible_count = None;
        }
    }
    Ok(out)
}

pub fn apply_cap(slate: &ObservedSlate, cap: u64) -> ObservedSlate {
    let mut out = slate.clone();
    for e in &mut out.entries {
        e.visible_count = e.visible_count.map(|c| c.min(cap));
    }
    out
}

/// Applies every pin active in `round`, in list order.
pub fn apply_ranking(
    list: &[Intervention],
    round: u32,
    permutation: Permutation,
) -> Result<Permutation, InterventionError> {
    list.iter()
        .filter(|iv| iv.active_rounds().contains(round))
        .try_fold(permutation, |perm, iv| match iv {
            Intervention::PinRanking { pins, .. } => apply_pin(&perm, pins),
            _ => Ok(perm),
        })
}

/// Applies every mask and cap active in `round`, in list order.
pub fn apply_display(
    list: &[Intervention],
    round: u32,
    slate: ObservedSlate,
) -> Result<ObservedSlate, InterventionError> {
    list.iter()
        .filter(|iv| iv.active_rounds().contains(round))
        .try_fold(slate, |s, iv| match iv {
            Intervention::MaskSignals { items, .. } => apply_mask(&s, items),
            Intervention::CapMagnitude { cap, .. } => Ok(apply_cap(&s, *cap)),
            Intervention::PinRanking { .. } => Ok(s),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiftReport {
    pub condition: String,
    pub target: ItemId,
    pub decisions: usize,
    pub base_rate: f64,
    pub base_se: f64,
    pub treated_rate: f64,
    pub treated_se: f64,
    pub lift: f64,
    /// Standard error of the mean paired per-decision difference.
    pub lift_se: f64,
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Selection-rate difference for `target` between two paired runs. The runs
/// must share every config field except the intervention list.
pub fn measure_lift(base: &RunArtifact, treated: &RunArtifact, target: ItemId) -> Result<LiftReport, Error> {
    let mut a = base.config.clone();
    let mut b = treated.config.clone();
    a.interventions.clear();
    b.interventions.clear();
    if a != b {
        return Err(InterventionError::ConfigMismatch("configs differ beyond interventions".into()).into());
    }
    if target as usize >= base.config.slate_size as usize {
        return Err(InterventionError::UnknownItem(target).into());
    }
    let hits = |run: &RunArtifact| -> Vec<f64> {
        run.trajectories
            .iter()
            .flat_map(|t| &t.events)
            .map(|e| if e.decision.contains(&target) { 1.0 } else { 0.0 })
            .collect()
    };
    let hb = hits(base);
    let ht = hits(treated);
    if hb.len() != ht.len() {
        return Err(InterventionError::ConfigMismatch(format!(
            "{} base decisions vs {} treated",
            hb.len(),
            ht.len()
        ))
        .into());
    }
    let n = hb.len();
    if n == 0 {
        return Err(crate::metrics::MetricsError::NoData.into());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let base_rate = mean(&hb);
    let treated_rate = mean(&ht);
    let diffs: Vec<f64> = ht.iter().zip(&hb).map(|(t, b)| t - b).collect();
    let lift = mean(&diffs);
    let lift_se = if n > 1 {
        let var = diffs.iter().map(|d| (d - lift).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(LiftReport {
        condition: base.config.condition_label.clone(),
        target,
        decisions: n,
        base_rate,
        base_se: binomial_se(base_rate, n),
        treated_rate,
        treated_se: binomial_se(treated_rate, n),
        lift,
        lift_se,
    })
}

/// Runs `config` with and without `intervention` appended, on paired seeds.
pub fn paired_attack(
    config: &ExperimentConfig,
    intervention: Intervention,
    target: ItemId,
) -> Result<(RunArtifact, RunArtifact, LiftReport), Error> {
    let mut treated_cfg = config.clone();
    treated_cfg.interventions.push(intervention);
    treated_cfg.validate()?;
    let base = run_experiment(config)?;
    let treated = run_experiment(&treated_cfg)?;
    let report = measure_lift(&base, &treated, target)?;
    Ok((base, treated, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub dimension: Dimension,
    pub detector: String,
    pub base_effect: f64,
    pub perturbed_effect: f64,
    pub change: f64,
    pub base_detected: bool,
    pub perturbed_detected: bool,
}

impl SensitivityRow {
    /// The phenomenon is present in the base run and gone once perturbed.
    pub fn destroys(&self) -> bool {
        self.base_detected && !self.perturbed_detected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub condition: String,
    pub rows: Vec<SensitivityRow>,
}

/// For each dimension, runs base and single-dimension-perturbed configs on
/// identical seeds and records each detector's effect-size change.
pub fn sensitivity_analysis(config: &ExperimentConfig, dimensions: &[Dimension]) -> Result<SensitivityReport, Error> {
    let mut rows = Vec::new();
    if !dimensions.is_empty() {
        let detectors: Vec<DetectorSpec> = config.effective_detectors();
        let base = run_experiment(config)?;
        let base_reports = detectors
            .iter()
            .map(|d| detect_phenomenon(&base, d))
            .collect::<Result<Vec<_>, _>>()?;
        for &dim in dimensions {
            let mut perturbed_cfg = config.clone();
            perturbed_cfg.architecture = config.architecture.perturb(dim)?;
            perturbed_cfg.validate()?;
            let perturbed = run_experiment(&perturbed_cfg)?;
            for (d, b) in detectors.iter().zip(&base_reports) {
                let p = detect_phenomenon(&perturbed, d)?;
                rows.push(SensitivityRow {
                    dimension: dim,
                    detector: b.detector.clone(),
                    base_effect: b.effect_size,
                    perturbed_effect: p.effect_size,
                    change: p.effect_size - b.effect_size,
                    base_detected: b.detected,
                    perturbed_detected: p.detected,
                });
            }
        }
    }
    Ok(SensitivityReport {
        condition: config.condition_label.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feed::SlateEntry;
    use proptest::prelude::*;

    fn all_perms(n: u32) -> Vec<Vec<u32>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in all_perms(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn observed(counts: &[Option<u64>]) -> ObservedSlate {
        ObservedSlate {
            entries: counts
                .iter()
                .enumerate()
                .map(|(i, &c)| SlateEntry {
                    item_id: i as ItemId,
                    rank: i as Rank + 1,
                    visible_count: c,
                })
                .collect(),
        }
    }

    #[test]
    fn pin_to_top() {
        let p = Permutation::from_order((0..10).rev().collect()).unwrap();
        let q = apply_pin(&p, &[Pin { item: 7, slot: 1 }]).unwrap();
        assert_eq!(q.order()[0], 7);
        assert_eq!(q.order()[1..], [9, 8, 6, 5, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn empty_pin_is_identity() {
        let p = Permutation::from_order(vec![2, 0, 1]).unwrap();
        assert_eq!(apply_pin(&p, &[]).unwrap(), p);
    }

    #[test]
    fn pin_two_of_four_preserves_rest_in_all_bases() {
        let pins = [Pin { item: 3, slot: 1 }, Pin { item: 0, slot: 3 }];
        let bases = all_perms(4);
        assert_eq!(bases.len(), 24);
        for base in bases {
            let p = Permutation::from_order(base.clone()).unwrap();
            let q = apply_pin(&p, &pins).unwrap();
            assert_eq!(q.order()[0], 3);
            assert_eq!(q.order()[2], 0);
            let before: Vec<u32> = base.iter().copied().filter(|&i| i == 1 || i == 2).collect();
            let after: Vec<u32> = q.order().iter().copied().filter(|&i| i == 1 || i == 2).collect();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn pin_errors() {
        let p = Permutation::identity(4);
        assert_eq!(
            apply_pin(&p, &[Pin { item: 1, slot: 1 }, Pin { item: 2, slot: 1 }]),
            Err(InterventionError::DuplicateSlot(1))
        );
        assert_eq!(
            apply_pin(&p, &[Pin { item: 1, slot: 1 }, Pin { item: 1, slot: 2 }]),
            Err(InterventionError::DuplicateItem(1))
        );
        assert_eq!(
            apply_pin(&p, &[Pin { item: 9, slot: 1 }]),
            Err(InterventionError::UnknownItem(9))
        );
        assert!(matches!(
            apply_pin(&p, &[Pin { item: 1, slot: 5 }]),
            Err(InterventionError::SlotOutOfRange { .. })
        ));
        assert!(matches!(
            apply_pin(&p, &[Pin { item: 1, slot: 0 }]),
            Err(InterventionError::SlotOutOfRange { .. })
        ));
    }

    #[test]
    fn mask_all_equals_hidden() {
        let s = observed(&[Some(1), Some(0), Some(5)]);
        let m = apply_mask(&s, &[0, 1, 2]).unwrap();
        assert!(m.entries.iter().all(|e| e.visible_count.is_none()));
        assert_eq!(apply_mask(&s, &[]).unwrap(), s);
        assert_eq!(apply_mask(&s, &[3]), Err(InterventionError::UnknownItem(3)));
    }

    #[test]
    fn mask_one_item_under_seeded() {
        let s = observed(&[Some(0), Some(1), Some(10), Some(100)]);
        let m = apply_mask(&s, &[2]).unwrap();
        let diff: Vec<usize> = (0..4).filter(|&i| s.entries[i] != m.entries[i]).collect();
        assert_eq!(diff, vec![2]);
        assert_eq!(m.entries[2].visible_count, None);
    }

    #[test]
    fn cap_cases() {
        let s = observed(&[Some(0), Some(3), None, Some(100)]);
        assert_eq!(
            apply_cap(&s, 0).visible_counts(),
            vec![Some(0), Some(0), None, Some(0)]
        );
        assert_eq!(apply_cap(&s, 100), s);
        assert_eq!(
            apply_cap(&s, 1).visible_counts(),
            vec![Some(0), Some(1), None, Some(1)]
        );
    }

    #[test]
    fn round_ranges() {
        let r = RoundRange { start: 2, end: Some(4) };
        assert!(!r.contains(1));
        assert!(r.contains(2) && r.contains(3));
        assert!(!r.contains(4));
        assert!(RoundRange::default().contains(1_000_000));
    }

    #[test]
    fn inactive_interventions_skipped() {
        let list = vec![Intervention::PinRanking {
            pins: vec![Pin { item: 2, slot: 1 }],
            active_rounds: RoundRange { start: 1, end: None },
        }];
        let p = Permutation::identity(3);
        assert_eq!(apply_ranking(&list, 0, p.clone()).unwrap(), p);
        assert_eq!(apply_ranking(&list, 1, p).unwrap().order()[0], 2);
    }

    #[test]
    fn intervention_json_shape() {
        let iv: Intervention =
            serde_json::from_str(r#"{"kind":"pin_ranking","pins":[{"item":7,"slot":1}]}"#).unwrap();
        assert_eq!(iv, Intervention::pin(vec![Pin { item: 7, slot: 1 }]));
        assert!(serde_json::from_str::<Intervention>(r#"{"kind":"cap_magnitude","cap":1,"x":0}"#).is_err());
    }

    proptest! {
        #[test]
        fn prop_pin_preserves_relative_order(
            seed: u64,
            n in 2usize..30,
            raw_pins in proptest::collection::vec((0u32..30, 1u32..31), 0..5),
        ) {
            let mut s = crate::rng::split_stream(seed, &[]);
            let p = crate::feed::shuffle_slate(&crate::feed::Slate::with_size(n), &mut s).unwrap();
            let mut pins = Vec::new();
            for (item, slot) in raw_pins {
                let (item, slot) = (item % n as u32, (slot - 1) % n as u32 + 1);
                if pins.iter().all(|q: &Pin| q.item != item && q.slot != slot) {
                    pins.push(Pin { item, slot });
                }
            }
            let q = apply_pin(&p, &pins).unwrap();
            prop_assert!(q.is_bijection());
            for pin in &pins {
                prop_assert_eq!(q.item_at(pin.slot), Some(pin.item));
            }
            let unpinned = |perm: &Permutation| -> Vec<u32> {
                perm.order().iter().copied().filter(|i| pins.iter().all(|p| p.item != *i)).collect()
            };
            prop_assert_eq!(unpinned(&p), unpinned(&q));
        }

        #[test]
        fn prop_disjoint_mask_and_cap_commute(
            counts in proptest::collection::vec(proptest::option::of(0u64..200), 10),
            masked in proptest::collection::vec(0u32..10, 0..4),
            cap in 0u64..50,
        ) {
            let s = observed(&counts);
            let mc = apply_display(&[Intervention::mask(masked.clone()), Intervention::cap(cap)], 0, s.clone()).unwrap();
            let cm = apply_display(&[Intervention::cap(cap), Intervention::mask(masked)], 0, s).unwrap();
            prop_assert_eq!(mc, cm);
        }
    }
}
