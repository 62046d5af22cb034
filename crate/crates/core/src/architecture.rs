//! Interaction-architecture design variables: who sees which signals, when,
//! in what turn structure, and with how much memory.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Window used when perturbing a stateless architecture into a windowed one.
pub const DEFAULT_MEMORY_WINDOW: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityKind {
    Hidden,
    Organic,
    Seeded,
}

/// Per-item display levels for the seeded regime.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeededLevels {
    /// One level per item id.
    Explicit(Vec<u64>),
    /// `levels[item_id % levels.len()]`.
    RoundRobin { round_robin: Vec<u64> },
}

impl SeededLevels {
    /// Starting config only; these levels carry no empirical weight.
    pub fn default_round_robin() -> Self {
        SeededLevels::RoundRobin {
            round_robin: vec![0, 1, 10, 100],
        }
    }

    pub fn resolve(&self, slate_size: usize) -> Vec<u64> {
        match self {
            SeededLevels::Explicit(v) => v.clone(),
            SeededLevels::RoundRobin { round_robin } if round_robin.is_empty() => Vec::new(),
            SeededLevels::RoundRobin { round_robin } => (0..slate_size)
                .map(|i| round_robin[i % round_robin.len()])
                .collect(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            SeededLevels::Explicit(v) => v.is_empty(),
            SeededLevels::RoundRobin { round_robin } => round_robin.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilityRegime {
    pub kind: VisibilityKind,
    /// Organic only: agents in round `r` see the ledger as of the start of
    /// round `r - latency_rounds`. Zero defers to the turn snapshot rule.
    /// A hidden regime may carry a latent value restored by perturbation.
    #[serde(default)]
    pub latency_rounds: u32,
    /// Required for seeded. A hidden regime may carry latent levels, which
    /// makes the visibility toggle return to seeded.
    #[serde(default)]
    pub seeded_levels: Option<SeededLevels>,
}

impl VisibilityRegime {
    pub fn hidden() -> Self {
        VisibilityRegime {
            kind: VisibilityKind::Hidden,
            latency_rounds: 0,
            seeded_levels: None,
        }
    }

    pub fn organic() -> Self {
        VisibilityRegime {
            kind: VisibilityKind::Organic,
            ..Self::hidden()
        }
    }

    pub fn seeded(levels: SeededLevels) -> Self {
        VisibilityRegime {
            kind: VisibilityKind::Seeded,
            latency_rounds: 0,
            seeded_levels: Some(levels),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnMode {
    Sequential,
    Simultaneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnOrdering {
    Fixed,
    RandomEachRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Snapshot {
    /// Everyone in a round sees the ledger as it stood when the round began.
    RoundStart,
    /// Sequential agents see endorsements made earlier in the same round.
    Live,
}

impl Snapshot {
    pub fn default_for(kind: VisibilityKind) -> Self {
        match kind {
            VisibilityKind::Organic => Snapshot::Live,
            _ => Snapshot::RoundStart,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnStructure {
    pub mode: TurnMode,
    pub ordering: TurnOrdering,
    pub snapshot: Snapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Stateless,
    Windowed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryRegime {
    pub kind: MemoryKind,
    #[serde(default)]
    pub window: Option<u32>,
}

impl MemoryRegime {
    pub fn stateless() -> Self {
        MemoryRegime {
            kind: MemoryKind::Stateless,
            window: None,
        }
    }

    pub fn windowed(window: u32) -> Self {
        MemoryRegime {
            kind: MemoryKind::Windowed,
            window: Some(window),
        }
    }

    /// Number of past own-decision records an agent receives.
    pub fn capacity(&self) -> usize {
        match self.kind {
            MemoryKind::Stateless => 0,
            MemoryKind::Windowed => self.window.unwrap_or(0) as usize,
        }
    }
}

/// Only the shared broadcast feed is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Communication {
    #[default]
    Broadcast,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionArchitecture {
    pub visibility: VisibilityRegime,
    pub turns: TurnStructure,
    pub memory: MemoryRegime,
    #[serde(default)]
    pub communication: Communication,
    pub agents_per_round: u32,
    pub rounds: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Visibility,
    TurnOrder,
    Memory,
    Snapshot,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Visibility,
        Dimension::TurnOrder,
        Dimension::Memory,
        Dimension::Snapshot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Visibility => "visibility",
            Dimension::TurnOrder => "turn_order",
            Dimension::Memory => "memory",
            Dimension::Snapshot => "snapshot",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| ConfigError::new(format!("unknown dimension `{s}`")))
    }
}

impl InteractionArchitecture {
    /// The single-agent baseline: hidden signals, sequential fixed turns,
    /// stateless agents.
    pub fn baseline() -> Self {
        InteractionArchitecture {
            visibility: VisibilityRegime::hidden(),
            turns: TurnStructure {
                mode: TurnMode::Sequential,
                ordering: TurnOrdering::Fixed,
                snapshot: Snapshot::RoundStart,
            },
            memory: MemoryRegime::stateless(),
            communication: Communication::Broadcast,
            agents_per_round: 1,
            rounds: 1,
        }
    }

    /// Collects every violated constraint.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        let vis = &self.visibility;
        match vis.kind {
            VisibilityKind::Seeded => {
                match &vis.seeded_levels {
                    None => v.push("seeded visibility requires seeded_levels".to_string()),
                    Some(l) if l.is_empty() => v.push("seeded_levels must not be empty".to_string()),
                    Some(_) => {}
                }
                if vis.latency_rounds > 0 {
                    v.push("latency_rounds applies to organic visibility only".to_string());
                }
            }
            VisibilityKind::Organic => {
                if vis.seeded_levels.is_some() {
                    v.push("seeded_levels is not allowed with organic visibility".to_string());
                }
            }
            VisibilityKind::Hidden => {
                if vis.seeded_levels.is_some() && vis.latency_rounds > 0 {
                    v.push("hidden visibility may carry latent seeded_levels or latency_rounds, not both".to_string());
                }
            }
        }
        if self.turns.mode == TurnMode::Simultaneous {
            if self.turns.snapshot == Snapshot::Live {
                v.push("simultaneous requires round-start snapshot".to_string());
            }
            if self.turns.ordering != TurnOrdering::Fixed {
                v.push("turn ordering applies to sequential mode only".to_string());
            }
        }
        match (self.memory.kind, self.memory.window) {
            (MemoryKind::Stateless, Some(_)) => {
                v.push("stateless memory must not set a window".to_string())
            }
            (MemoryKind::Windowed, None | Some(0)) => {
                v.push("windowed memory requires a positive window".to_string())
            }
            _ => {}
        }
        if self.agents_per_round == 0 {
            v.push("agents_per_round must be positive".to_string());
        }
        if self.rounds == 0 {
            v.push("rounds must be positive".to_string());
        }
        ConfigError::from_violations(v)
    }

    /// Returns a copy that differs in exactly `dim`. Each toggle is its own
    /// inverse:
    ///
    /// * visibility: hidden ↔ organic, or hidden ↔ seeded when the hidden
    ///   regime carries latent seeded levels
    /// * turn_order: fixed ↔ random_each_round (sequential only)
    /// * memory: stateless ↔ windowed(1); any windowed → stateless
    /// * snapshot: round_start ↔ live (sequential only)
    pub fn perturb(&self, dim: Dimension) -> Result<Self, ConfigError> {
        let mut out = self.clone();
        match dim {
            Dimension::Visibility => {
                out.visibility.kind = match (self.visibility.kind, &self.visibility.seeded_levels) {
                    (VisibilityKind::Hidden, Some(_)) => VisibilityKind::Seeded,
                    (VisibilityKind::Hidden, None) => VisibilityKind::Organic,
                    (VisibilityKind::Organic | VisibilityKind::Seeded, _) => VisibilityKind::Hidden,
                };
            }
            Dimension::TurnOrder => {
                if self.turns.mode != TurnMode::Sequential {
                    return Err(ConfigError::new("turn_order perturbation requires sequential turns"));
                }
                out.turns.ordering = match self.turns.ordering {
                    TurnOrdering::Fixed => TurnOrdering::RandomEachRound,
                    TurnOrdering::RandomEachRound => TurnOrdering::Fixed,
                };
            }
            Dimension::Memory => {
                out.memory = match self.memory.kind {
                    MemoryKind::Stateless => MemoryRegime::windowed(DEFAULT_MEMORY_WINDOW),
                    MemoryKind::Windowed => MemoryRegime::stateless(),
                };
            }
            Dimension::Snapshot => {
                if self.turns.mode != TurnMode::Sequential {
                    return Err(ConfigError::new("snapshot perturbation requires sequential turns"));
                }
                out.turns.snapshot = match self.turns.snapshot {
                    Snapshot::RoundStart => Snapshot::Live,
                    Snapshot::Live => Snapshot::RoundStart,
                };
            }
        }
        Ok(out)
    }

    /// Dimensions in which `self` and `other` differ. Population size and
    /// round count are not dimensions; compare those directly.
    pub fn differing_dimensions(&self, other: &Self) -> Vec<Dimension> {
        let mut d = Vec::new();
        if self.visibility != other.visibility {
            d.push(Dimension::Visibility);
        }
        if self.turns.ordering != other.turns.ordering {
            d.push(Dimension::TurnOrder);
        }
        if self.memory != other.memory {
            d.push(Dimension::Memory);
        }
        if self.turns.snapshot != other.turns.snapshot {
            d.push(Dimension::Snapshot);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simultaneous_live_rejected() {
        let mut a = InteractionArchitecture::baseline();
        a.turns.mode = TurnMode::Simultaneous;
        a.turns.snapshot = Snapshot::Live;
        let err = a.validate().unwrap_err();
        assert_eq!(err.violations, vec!["simultaneous requires round-start snapshot"]);
    }

    #[test]
    fn stateless_with_window_rejected() {
        let mut a = InteractionArchitecture::baseline();
        a.memory.window = Some(3);
        assert!(a.validate().is_err());
    }

    #[test]
    fn all_violations_reported() {
        let mut a = InteractionArchitecture::baseline();
        a.turns.mode = TurnMode::Simultaneous;
        a.turns.snapshot = Snapshot::Live;
        a.turns.ordering = TurnOrdering::RandomEachRound;
        a.memory.window = Some(2);
        a.rounds = 0;
        a.agents_per_round = 0;
        assert_eq!(a.validate().unwrap_err().violations.len(), 5);
    }

    #[test]
    fn baseline_accepted_unchanged() {
        let a = InteractionArchitecture::baseline();
        let before = a.clone();
        a.validate().unwrap();
        a.validate().unwrap();
        assert_eq!(a, before);
    }

    #[test]
    fn turn_order_perturbation_is_single_field() {
        let a = InteractionArchitecture::baseline();
        let b = a.perturb(Dimension::TurnOrder).unwrap();
        assert_eq!(b.turns.ordering, TurnOrdering::RandomEachRound);
        assert_eq!(a.differing_dimensions(&b), vec![Dimension::TurnOrder]);
        let mut c = b.clone();
        c.turns.ordering = TurnOrdering::Fixed;
        assert_eq!(c, a);
    }

    #[test]
    fn visibility_hidden_to_organic() {
        let a = InteractionArchitecture::baseline();
        let b = a.perturb(Dimension::Visibility).unwrap();
        assert_eq!(b.visibility.kind, VisibilityKind::Organic);
        assert_eq!(a.turns, b.turns);
        assert_eq!(a.memory, b.memory);
        assert_eq!(a.communication, b.communication);
        assert_eq!(a.agents_per_round, b.agents_per_round);
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.visibility.latency_rounds, b.visibility.latency_rounds);
        assert_eq!(a.visibility.seeded_levels, b.visibility.seeded_levels);
    }

    #[test]
    fn seeded_toggles_through_hidden() {
        let mut a = InteractionArchitecture::baseline();
        a.visibility = VisibilityRegime::seeded(SeededLevels::default_round_robin());
        let b = a.perturb(Dimension::Visibility).unwrap();
        assert_eq!(b.visibility.kind, VisibilityKind::Hidden);
        b.validate().unwrap();
        assert_eq!(b.perturb(Dimension::Visibility).unwrap(), a);
    }

    #[test]
    fn every_perturbation_is_an_involution() {
        let mut archs = vec![InteractionArchitecture::baseline()];
        let mut organic = InteractionArchitecture::baseline();
        organic.visibility = VisibilityRegime::organic();
        organic.visibility.latency_rounds = 2;
        organic.turns.snapshot = Snapshot::Live;
        organic.agents_per_round = 4;
        archs.push(organic);
        let mut windowed = InteractionArchitecture::baseline();
        windowed.memory = MemoryRegime::windowed(1);
        archs.push(windowed);
        for a in &archs {
            a.validate().unwrap();
            for d in Dimension::ALL {
                let b = a.perturb(d).unwrap();
                b.validate().unwrap();
                assert_eq!(a.differing_dimensions(&b), vec![d]);
                assert_eq!(&b.perturb(d).unwrap(), a, "dimension {d}");
            }
        }
    }

    #[test]
    fn simultaneous_rejects_order_and_snapshot_perturbation() {
        let mut a = InteractionArchitecture::baseline();
        a.turns.mode = TurnMode::Simultaneous;
        assert!(a.perturb(Dimension::TurnOrder).is_err());
        assert!(a.perturb(Dimension::Snapshot).is_err());
        assert!(a.perturb(Dimension::Memory).is_ok());
    }

    #[test]
    fn dimension_parsing() {
        assert_eq!("turn_order".parse::<Dimension>().unwrap(), Dimension::TurnOrder);
        assert!("colour".parse::<Dimension>().is_err());
    }

    #[test]
    fn round_robin_levels() {
        let l = SeededLevels::default_round_robin().resolve(6);
        assert_eq!(l, vec![0, 1, 10, 100, 0, 1]);
    }
}
