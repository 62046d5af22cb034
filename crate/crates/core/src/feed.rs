//! Content slate, endorsement ledger, presentation permutations and rendering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::architecture::VisibilityKind;
use crate::error::ConfigError;
use crate::rng::Stream;

pub type ItemId = u32;

/// 1-based displayed position; rank 1 is the top slot.
pub type Rank = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeedError {
    #[error("slate is empty")]
    EmptySlate,
    #[error("unknown item id {0}")]
    UnknownItem(ItemId),
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedItem {
    pub item_id: ItemId,
    /// Content placeholder. No built-in policy reads it.
    pub label: String,
}

/// An ordered content slate with ids contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slate {
    items: Vec<FeedItem>,
}

impl Slate {
    pub fn with_size(n: usize) -> Self {
        let items = (0..n as ItemId)
            .map(|item_id| FeedItem {
                item_id,
                label: format!("item-{item_id}"),
            })
            .collect();
        Slate { items }
    }

    pub fn from_items(items: Vec<FeedItem>) -> Result<Self, FeedError> {
        for (i, item) in items.iter().enumerate() {
            if item.item_id as usize != i {
                return Err(FeedError::InvalidPermutation(format!(
                    "item ids must be contiguous from 0; position {i} holds id {}",
                    item.item_id
                )));
            }
        }
        Ok(Slate { items })
    }

    pub fn items(&self) -> &[FeedItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, id: ItemId) -> bool {
        (id as usize) < self.items.len()
    }
}

/// Authoritative endorsement counts. Counts only ever grow and always sum to
/// `total_events`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedLedger {
    counts: Vec<u64>,
    total_events: u64,
}

impl FeedLedger {
    pub fn new(slate_size: usize) -> Self {
        FeedLedger {
            counts: vec![0; slate_size],
            total_events: 0,
        }
    }

    pub fn count(&self, id: ItemId) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_events(&self) -> u64 {
        self.total_events
    }

    pub fn is_conserved(&self) -> bool {
        self.counts.iter().sum::<u64>() == self.total_events
    }

    /// Adds one endorsement per entry of `decisions`. Validates every id
    /// before touching the ledger, so a failed call leaves it unchanged.
    pub fn apply_endorsements(&mut self, decisions: &[ItemId]) -> Result<(), FeedError> {
        if let Some(&bad) = decisions
            .iter()
            .find(|&&id| id as usize >= self.counts.len())
        {
            return Err(FeedError::UnknownItem(bad));
        }
        for &id in decisions {
            self.counts[id as usize] += 1;
        }
        self.total_events += decisions.len() as u64;
        Ok(())
    }
}

/// Presentation order: `order[i]` is the item shown at rank `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation {
    order: Vec<ItemId>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            order: (0..n as ItemId).collect(),
        }
    }

    pub fn from_order(order: Vec<ItemId>) -> Result<Self, FeedError> {
        let mut seen = vec![false; order.len()];
        for &id in &order {
            match seen.get_mut(id as usize) {
                Some(s) if !*s => *s = true,
                Some(_) => {
                    return Err(FeedError::InvalidPermutation(format!("item {id} repeated")))
                }
                None => return Err(FeedError::InvalidPermutation(format!("item {id} out of range"))),
            }
        }
        Ok(Permutation { order })
    }

    pub fn order(&self) -> &[ItemId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn item_at(&self, rank: Rank) -> Option<ItemId> {
        self.order.get(rank.checked_sub(1)? as usize).copied()
    }

    pub fn rank_of(&self, id: ItemId) -> Option<Rank> {
        self.order
            .iter()
            .position(|&x| x == id)
            .map(|i| i as Rank + 1)
    }

    pub fn is_bijection(&self) -> bool {
        Permutation::from_order(self.order.clone()).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlateEntry {
    pub item_id: ItemId,
    pub rank: Rank,
    pub visible_count: Option<u64>,
}

/// What one agent sees: the slate in displayed order with optional counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedSlate {
    pub entries: Vec<SlateEntry>,
}

impl ObservedSlate {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry_for(&self, id: ItemId) -> Option<&SlateEntry> {
        self.entries.iter().find(|e| e.item_id == id)
    }

    pub fn order(&self) -> Vec<ItemId> {
        self.entries.iter().map(|e| e.item_id).collect()
    }

    pub fn visible_counts(&self) -> Vec<Option<u64>> {
        self.entries.iter().map(|e| e.visible_count).collect()
    }
}

/// Fisher–Yates over `stream`: for `i` from `n-1` down to 1 swap position `i`
/// with `below(i + 1)`. Consumes exactly `n - 1` draws.
pub fn shuffle_slate(slate: &Slate, stream: &mut Stream) -> Result<Permutation, FeedError> {
    if slate.is_empty() {
        return Err(FeedError::EmptySlate);
    }
    let mut order: Vec<ItemId> = slate.items().iter().map(|i| i.item_id).collect();
    for i in (1..order.len()).rev() {
        let j = stream.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    Ok(Permutation { order })
}

/// Renders `permutation` against a ledger snapshot. The caller picks the
/// snapshot (round start or lagged); rendering itself is pure.
pub fn render_slate(
    permutation: &Permutation,
    ledger: &FeedLedger,
    regime: VisibilityKind,
    seeded_levels: Option<&[u64]>,
) -> Result<ObservedSlate, FeedError> {
    let levels = match regime {
        VisibilityKind::Seeded => {
            let levels = seeded_levels.ok_or_else(|| {
                ConfigError::new("seeded visibility requires seeded_levels")
            })?;
            if levels.len() < permutation.len() {
                return Err(ConfigError::new(format!(
                    "seeded_levels covers {} items but the slate has {}",
                    levels.len(),
                    permutation.len()
                ))
                .into());
            }
            Some(levels)
        }
        _ => None,
    };
    let entries = permutation
        .order()
        .iter()
        .enumerate()
        .map(|(i, &item_id)| {
            let visible_count = match regime {
                VisibilityKind::Hidden => None,
                VisibilityKind::Organic => ledger.count(item_id).or(Some(0)),
                VisibilityKind::Seeded => levels.map(|l| l[item_id as usize]),
            };
            SlateEntry {
                item_id,
                rank: i as Rank + 1,
                visible_count,
            }
        })
        .collect();
    Ok(ObservedSlate { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::split_stream;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn shuffle_48_is_a_permutation() {
        let slate = Slate::with_size(48);
        let mut s = split_stream(1, &[]);
        let p = shuffle_slate(&slate, &mut s).unwrap();
        assert_eq!(p.len(), 48);
        assert!(p.is_bijection());
        assert_eq!(s.draws(), 47);
    }

    #[test]
    fn shuffle_single_item_is_identity() {
        let mut s = split_stream(1, &[]);
        let p = shuffle_slate(&Slate::with_size(1), &mut s).unwrap();
        assert_eq!(p, Permutation::identity(1));
    }

    #[test]
    fn shuffle_empty_slate_errors() {
        let mut s = split_stream(1, &[]);
        assert_eq!(
            shuffle_slate(&Slate::with_size(0), &mut s),
            Err(FeedError::EmptySlate)
        );
    }

    #[test]
    fn shuffle_three_items_hits_all_orderings() {
        let slate = Slate::with_size(3);
        let mut s = split_stream(2, &[]);
        let mut seen: HashMap<Vec<ItemId>, usize> = HashMap::new();
        for _ in 0..6000 {
            *seen
                .entry(shuffle_slate(&slate, &mut s).unwrap().order().to_vec())
                .or_default() += 1;
        }
        assert_eq!(seen.len(), 6);
        assert!(seen.values().all(|&c| (800..1200).contains(&c)));
    }

    #[test]
    fn render_hidden_has_no_counts() {
        let p = Permutation::identity(5);
        let mut ledger = FeedLedger::new(5);
        ledger.apply_endorsements(&[2, 2]).unwrap();
        let obs = render_slate(&p, &ledger, VisibilityKind::Hidden, None).unwrap();
        assert!(obs.entries.iter().all(|e| e.visible_count.is_none()));
    }

    #[test]
    fn render_organic_fresh_ledger_is_zero() {
        let p = Permutation::identity(4);
        let obs = render_slate(&p, &FeedLedger::new(4), VisibilityKind::Organic, None).unwrap();
        assert!(obs.entries.iter().all(|e| e.visible_count == Some(0)));
    }

    #[test]
    fn render_seeded_passes_levels_through() {
        let mut levels = vec![0u64; 10];
        levels[7] = 5;
        let p = Permutation::from_order(vec![7, 3, 0, 1, 2, 4, 5, 6, 8, 9]).unwrap();
        let mut ledger = FeedLedger::new(10);
        ledger.apply_endorsements(&[3, 3, 3]).unwrap();
        let obs = render_slate(&p, &ledger, VisibilityKind::Seeded, Some(&levels)).unwrap();
        assert_eq!(obs.entry_for(7).unwrap().visible_count, Some(5));
        assert_eq!(obs.entry_for(7).unwrap().rank, 1);
        assert!(obs
            .entries
            .iter()
            .filter(|e| e.item_id != 7)
            .all(|e| e.visible_count == Some(0)));
    }

    #[test]
    fn render_seeded_without_levels_is_config_error() {
        let p = Permutation::identity(3);
        let err = render_slate(&p, &FeedLedger::new(3), VisibilityKind::Seeded, None).unwrap_err();
        assert!(matches!(err, FeedError::Config(_)));
        let err =
            render_slate(&p, &FeedLedger::new(3), VisibilityKind::Seeded, Some(&[1, 2])).unwrap_err();
        assert!(matches!(err, FeedError::Config(_)));
    }

    #[test]
    fn endorsements_increment() {
        let mut ledger = FeedLedger::new(2);
        ledger.apply_endorsements(&[1]).unwrap();
        assert_eq!(ledger.counts(), &[0, 1]);
        assert_eq!(ledger.total_events(), 1);
        let before = ledger.clone();
        ledger.apply_endorsements(&[]).unwrap();
        assert_eq!(ledger, before);
    }

    #[test]
    fn unknown_item_leaves_ledger_untouched() {
        let mut ledger = FeedLedger::new(2);
        assert_eq!(
            ledger.apply_endorsements(&[0, 5]),
            Err(FeedError::UnknownItem(5))
        );
        assert_eq!(ledger, FeedLedger::new(2));
    }

    #[test]
    fn ten_thousand_single_endorsements_conserve() {
        let slate = Slate::with_size(48);
        let mut ledger = FeedLedger::new(48);
        let mut s = split_stream(3, &[]);
        for _ in 0..10_000 {
            let p = shuffle_slate(&slate, &mut s).unwrap();
            ledger.apply_endorsements(&[p.order()[0]]).unwrap();
        }
        assert_eq!(ledger.total_events(), 10_000);
        assert_eq!(ledger.counts().iter().sum::<u64>(), 10_000);
    }

    #[test]
    fn permutation_rejects_repeats() {
        assert!(Permutation::from_order(vec![0, 0, 1]).is_err());
        assert!(Permutation::from_order(vec![0, 3]).is_err());
        let p = Permutation::from_order(vec![2, 0, 1]).unwrap();
        assert_eq!(p.rank_of(0), Some(2));
        assert_eq!(p.item_at(1), Some(2));
        assert_eq!(p.item_at(0), None);
    }

    proptest! {
        #[test]
        fn prop_shuffle_bijective(n in 1usize..80, seed: u64) {
            let mut s = split_stream(seed, &[]);
            let p = shuffle_slate(&Slate::with_size(n), &mut s).unwrap();
            prop_assert!(p.is_bijection());
            prop_assert_eq!(s.draws(), n as u64 - 1);
        }

        #[test]
        fn prop_ledger_conserves(ops in proptest::collection::vec(proptest::collection::vec(0u32..12, 0..5), 0..40)) {
            let mut ledger = FeedLedger::new(10);
            let mut prev = ledger.counts().to_vec();
            for op in ops {
                let _ = ledger.apply_endorsements(&op);
                prop_assert!(ledger.is_conserved());
                prop_assert!(ledger.counts().iter().zip(&prev).all(|(a, b)| a >= b));
                prev = ledger.counts().to_vec();
            }
        }

        #[test]
        fn prop_render_is_pure(seed: u64, kind in 0u8..3) {
            let kind = [VisibilityKind::Hidden, VisibilityKind::Organic, VisibilityKind::Seeded][kind as usize];
            let mut s = split_stream(seed, &[]);
            let p = shuffle_slate(&Slate::with_size(12), &mut s).unwrap();
            let mut ledger = FeedLedger::new(12);
            ledger.apply_endorsements(&[1, 4, 4]).unwrap();
            let levels: Vec<u64> = (0..12).collect();
            let a = render_slate(&p, &ledger, kind, Some(&levels)).unwrap();
            let b = render_slate(&p, &ledger, kind, Some(&levels)).unwrap();
            prop_assert_eq!(&a.order(), p.order());
            prop_assert_eq!(a, b);
        }
    }
}
