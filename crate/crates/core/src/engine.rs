//! Deterministic episode and experiment execution.
//!
//! Random streams are addressed per turn, never shared, so results do not
//! depend on how replications are scheduled:
//!
//! | purpose      | path                                   |
//! |--------------|----------------------------------------|
//! | feed shuffle | `[replication, 0, round, agent_id]`    |
//! | policy draws | `[replication, 1, round, agent_id]`    |
//! | turn order   | `[replication, 2, round]`              |
//!
//! Within a simultaneous round every agent observes the round-start ledger
//! and decisions are applied in ascending agent id afterwards.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    AgentError, AgentObservation, Decision, HistoryRecord, Policy, PolicySpec, TurnContext,
};
use crate::architecture::{InteractionArchitecture, SeededLevels, Snapshot, TurnMode, TurnOrdering, VisibilityKind};
use crate::error::{ConfigError, Error};
use crate::feed::{render_slate, shuffle_slate, FeedError, FeedLedger, ItemId, ObservedSlate, Permutation, Rank, Slate, SlateEntry};
use crate::interventions::{apply_display, apply_ranking, validate_interventions, Intervention};
use crate::metrics::{self, DetectorSpec};
use crate::rng::{derive_seed, lanes, split_stream};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("replication {replication} aborted after {} events: {reason}", partial.events.len())]
    EpisodeAborted {
        replication: u32,
        reason: String,
        partial: Box<Trajectory>,
    },
    #[error("{source} ({} replications completed)", completed.len())]
    ReplicationsFailed {
        #[source]
        source: Box<EngineError>,
        completed: Vec<Trajectory>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub condition_label: String,
    pub slate_size: u32,
    pub architecture: InteractionArchitecture,
    pub policy: PolicySpec,
    pub interventions: Vec<Intervention>,
    pub detectors: Vec<DetectorSpec>,
    pub replications: u32,
    pub master_seed: u64,
}

impl ExperimentConfig {
    /// Single agent, single round per replication, hidden signals.
    pub fn baseline(policy: PolicySpec, replications: u32, master_seed: u64) -> Self {
        ExperimentConfig {
            condition_label: "baseline".to_string(),
            slate_size: 48,
            architecture: InteractionArchitecture::baseline(),
            policy,
            interventions: Vec::new(),
            detectors: Vec::new(),
            replications,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        let n = self.slate_size as usize;
        if n == 0 {
            v.push("slate_size must be positive".to_string());
        }
        if self.replications == 0 {
            v.push("replications must be positive".to_string());
        }
        if self.condition_label.is_empty() {
            v.push("condition_label must not be empty".to_string());
        }
        let mut extend = |r: Result<(), ConfigError>, prefix: &str| {
            if let Err(e) = r {
                v.extend(e.violations.into_iter().map(|m| format!("{prefix}{m}")));
            }
        };
        extend(self.architecture.validate(), "architecture: ");
        extend(self.policy.validate(n), "policy: ");
        extend(validate_interventions(&self.interventions, n), "");
        for (i, d) in self.detectors.iter().enumerate() {
            extend(d.validate(), &format!("detectors[{i}]: "));
        }
        if let Some(SeededLevels::Explicit(levels)) = &self.architecture.visibility.seeded_levels {
            if levels.len() != n {
                v.push(format!(
                    "architecture: seeded_levels has {} entries for a slate of {n}",
                    levels.len()
                ));
            }
        }
        ConfigError::from_violations(v)
    }

    pub fn seeded_levels(&self) -> Option<Vec<u64>> {
        self.architecture
            .visibility
            .seeded_levels
            .as_ref()
            .map(|l| l.resolve(self.slate_size as usize))
    }

    /// Configured detectors, or the default registry when none are listed.
    pub fn effective_detectors(&self) -> Vec<DetectorSpec> {
        if self.detectors.is_empty() {
            metrics::default_detectors()
        } else {
            self.detectors.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub round: u32,
    /// Position in the episode log, 0-based.
    pub turn_index: u64,
    pub agent_id: u32,
    pub permutation_digest: String,
    pub observed_counts_digest: String,
    pub decision: Decision,
    /// Item shown at each rank, top first.
    pub order: Vec<ItemId>,
    /// Count shown at each rank; `None` when hidden or masked.
    pub visible: Vec<Option<u64>>,
}

impl Event {
    pub fn observed(&self) -> ObservedSlate {
        ObservedSlate {
            entries: self
                .order
                .iter()
                .zip(&self.visible)
                .enumerate()
                .map(|(i, (&item_id, &visible_count))| SlateEntry {
                    item_id,
                    rank: i as Rank + 1,
                    visible_count,
                })
                .collect(),
        }
    }

    pub fn rank_of(&self, id: ItemId) -> Option<Rank> {
        self.order.iter().position(|&x| x == id).map(|i| i as Rank + 1)
    }

    /// `(item, displayed rank)` for every endorsement in this event.
    pub fn selections(&self) -> impl Iterator<Item = (ItemId, Rank)> + '_ {
        self.decision
            .iter()
            .map(|&id| (id, self.rank_of(id).expect("decision item on slate")))
    }
}

/// First 16 hex digits of SHA-256 over the little-endian item ids.
pub fn permutation_digest(order: &[ItemId]) -> String {
    let mut h = Sha256::new();
    for id in order {
        h.update(id.to_le_bytes());
    }
    short_hex(&h.finalize())
}

/// Counts are encoded per rank as a tag byte (0 hidden, 1 shown) followed
/// by the little-endian `u64` value when shown.
pub fn counts_digest(visible: &[Option<u64>]) -> String {
    let mut h = Sha256::new();
    for c in visible {
        match c {
            None => h.update([0u8]),
            Some(v) => {
                h.update([1u8]);
                h.update(v.to_le_bytes());
            }
        }
    }
    short_hex(&h.finalize())
}

fn short_hex(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub replication: u32,
    pub events: Vec<Event>,
    pub ledger: FeedLedger,
}

impl Trajectory {
    /// Rebuilds the ledger from the events alone.
    pub fn from_events(replication: u32, slate_size: usize, events: Vec<Event>) -> Result<Self, FeedError> {
        let mut ledger = FeedLedger::new(slate_size);
        for e in &events {
            ledger.apply_endorsements(&e.decision)?;
        }
        Ok(Trajectory {
            replication,
            events,
            ledger,
        })
    }

    pub fn decisions(&self) -> Vec<Decision> {
        self.events.iter().map(|e| e.decision.clone()).collect()
    }
}

/// Mutable state of one running episode. Owned by exactly one executor.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub ledger: FeedLedger,
    pub round: u32,
    pub agent_cursor: usize,
    /// `round_starts[r]` is the ledger when round `r` began.
    pub round_starts: Vec<FeedLedger>,
    pub permutations: Vec<Permutation>,
    pub event_log: Vec<Event>,
    histories: Vec<Vec<HistoryRecord>>,
}

impl EpisodeState {
    fn new(slate_size: usize, agents: usize) -> Self {
        EpisodeState {
            ledger: FeedLedger::new(slate_size),
            round: 0,
            agent_cursor: 0,
            round_starts: Vec::new(),
            permutations: Vec::new(),
            event_log: Vec::new(),
            histories: vec![Vec::new(); agents],
        }
    }

    fn into_trajectory(self, replication: u32) -> Trajectory {
        Trajectory {
            replication,
            events: self.event_log,
            ledger: self.ledger,
        }
    }
}

struct Episode<'a> {
    config: &'a ExperimentConfig,
    slate: Slate,
    levels: Option<Vec<u64>>,
    replication: u32,
    state: EpisodeState,
}

impl Episode<'_> {
    /// Ledger whose counts an agent acting now would be shown.
    fn visible_ledger(&self) -> &FeedLedger {
        let arch = &self.config.architecture;
        let round = self.state.round;
        let latency = arch.visibility.latency_rounds;
        if arch.visibility.kind == VisibilityKind::Organic && latency > 0 {
            return match round.checked_sub(latency) {
                Some(r) => &self.state.round_starts[r as usize],
                None => &self.state.round_starts[0],
            };
        }
        match (arch.turns.mode, arch.turns.snapshot) {
            (TurnMode::Sequential, Snapshot::Live) => &self.state.ledger,
            _ => &self.state.round_starts[round as usize],
        }
    }

    fn observe(&mut self, agent_id: u32) -> Result<(Permutation, ObservedSlate), Error> {
        let round = self.state.round;
        let mut shuffle_stream = split_stream(
            self.config.master_seed,
            &[self.replication as u64, lanes::SHUFFLE, round as u64, agent_id as u64],
        );
        let perm = shuffle_slate(&self.slate, &mut shuffle_stream)?;
        let perm = apply_ranking(&self.config.interventions, round, perm)?;
        let rendered = render_slate(
            &perm,
            self.visible_ledger(),
            self.config.architecture.visibility.kind,
            self.levels.as_deref(),
        )?;
        let shown = apply_display(&self.config.interventions, round, rendered)?;
        Ok((perm, shown))
    }

    fn turn(&mut self, agent_id: u32, policy: &mut dyn Policy) -> Result<Decision, Error> {
        let round = self.state.round;
        let (perm, shown) = self.observe(agent_id)?;
        let capacity = self.config.architecture.memory.capacity();
        let history = &self.state.histories[agent_id as usize];
        let obs = AgentObservation {
            slate: shown,
            history: history[history.len().saturating_sub(capacity)..].to_vec(),
        };
        let ctx = TurnContext {
            round,
            turn_index: self.state.event_log.len(),
            agent_id,
        };
        let mut policy_stream = split_stream(
            self.config.master_seed,
            &[self.replication as u64, lanes::POLICY, round as u64, agent_id as u64],
        );
        let decision = policy.decide(&ctx, &obs, &mut policy_stream)?;
        let order = obs.slate.order();
        let visible = obs.slate.visible_counts();
        let mut ranks = Vec::with_capacity(decision.len());
        for &id in &decision {
            match order.iter().position(|&x| x == id) {
                Some(i) => ranks.push(i as Rank + 1),
                None => return Err(FeedError::UnknownItem(id).into()),
            }
        }
        if capacity > 0 {
            self.state.histories[agent_id as usize].push(HistoryRecord {
                round,
                endorse: decision.clone(),
                ranks,
            });
        }
        self.state.event_log.push(Event {
            round,
            turn_index: ctx.turn_index as u64,
            agent_id,
            permutation_digest: permutation_digest(&order),
            observed_counts_digest: counts_digest(&visible),
            decision: decision.clone(),
            order,
            visible,
        });
        self.state.permutations.push(perm);
        Ok(decision)
    }

    fn agent_order(&self) -> Vec<u32> {
        let arch = &self.config.architecture;
        let mut order: Vec<u32> = (0..arch.agents_per_round).collect();
        if arch.turns.mode == TurnMode::Sequential && arch.turns.ordering == TurnOrdering::RandomEachRound {
            let mut s = split_stream(
                self.config.master_seed,
                &[self.replication as u64, lanes::TURN_ORDER, self.state.round as u64],
            );
            for i in (1..order.len()).rev() {
                let j = s.below(i as u64 + 1) as usize;
                order.swap(i, j);
            }
        }
        order
    }

    fn run(&mut self, policy: &mut dyn Policy) -> Result<(), Error> {
        let arch = &self.config.architecture;
        for round in 0..arch.rounds {
            self.state.round = round;
            self.state.round_starts.push(self.state.ledger.clone());
            let order = self.agent_order();
            match arch.turns.mode {
                TurnMode::Sequential => {
                    for (i, &agent) in order.iter().enumerate() {
                        self.state.agent_cursor = i;
                        let d = self.turn(agent, policy)?;
                        self.state.ledger.apply_endorsements(&d)?;
                    }
                }
                TurnMode::Simultaneous => {
                    let mut pending = Vec::with_capacity(order.len());
                    for (i, &agent) in order.iter().enumerate() {
                        self.state.agent_cursor = i;
                        pending.push(self.turn(agent, policy)?);
                    }
                    for d in &pending {
                        self.state.ledger.apply_endorsements(d)?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn run_episode(config: &ExperimentConfig, replication: u32) -> Result<Trajectory, EngineError> {
    let mut policy = config.policy.instantiate().map_err(|e| EngineError::EpisodeAborted {
        replication,
        reason: e.to_string(),
        partial: Box::new(Trajectory {
            replication,
            events: Vec::new(),
            ledger: FeedLedger::new(config.slate_size as usize),
        }),
    })?;
    run_episode_with(config, replication, policy.as_mut())
}

/// Runs one replication with a caller-supplied policy. On failure the events
/// logged so far are carried in `EpisodeAborted`.
pub fn run_episode_with(
    config: &ExperimentConfig,
    replication: u32,
    policy: &mut dyn Policy,
) -> Result<Trajectory, EngineError> {
    config.validate()?;
    let n = config.slate_size as usize;
    let mut episode = Episode {
        config,
        slate: Slate::with_size(n),
        levels: config.seeded_levels(),
        replication,
        state: EpisodeState::new(n, config.architecture.agents_per_round as usize),
    };
    match episode.run(policy) {
        Ok(()) => Ok(episode.state.into_trajectory(replication)),
        Err(e) => Err(EngineError::EpisodeAborted {
            replication,
            reason: e.to_string(),
            partial: Box::new(episode.state.into_trajectory(replication)),
        }),
    }
}

/// One summary row per replication and registered metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub condition: String,
    pub replication: u32,
    pub metric: String,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub engine_version: String,
    /// Excluded from determinism comparisons.
    pub timestamp_unix: u64,
}

impl Provenance {
    pub fn now() -> Self {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Provenance {
            engine_version: ENGINE_VERSION.to_string(),
            timestamp_unix: ts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub config: ExperimentConfig,
    pub trajectories: Vec<Trajectory>,
    pub summary: Vec<MetricRow>,
    pub provenance: Provenance,
}

impl RunArtifact {
    pub fn from_trajectories(config: ExperimentConfig, trajectories: Vec<Trajectory>) -> Self {
        let summary = trajectories
            .iter()
            .flat_map(|t| metrics::summary_rows(&config.condition_label, t))
            .collect();
        RunArtifact {
            config,
            trajectories,
            summary,
            provenance: Provenance::now(),
        }
    }

    /// Everything except the provenance block, as canonical JSON.
    pub fn comparable_json(&self) -> String {
        serde_json::to_string(&(&self.config, &self.trajectories, &self.summary))
            .expect("artifact serializes")
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.trajectories.iter().flat_map(|t| &t.events)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifact, EngineError> {
    let exec = match config.policy {
        // one agent process per replication; keep them serial
        PolicySpec::External { .. } => Execution::Sequential,
        _ => Execution::default(),
    };
    run_experiment_with(config, exec)
}

pub fn run_experiment_with(config: &ExperimentConfig, exec: Execution) -> Result<RunArtifact, EngineError> {
    run_experiment_using(config, exec, |_| config.policy.instantiate())
}

/// Runs every replication with a fresh policy from `make_policy`. Results
/// are merged in replication order regardless of `exec`.
pub fn run_experiment_using<F>(config: &ExperimentConfig, exec: Execution, make_policy: F) -> Result<RunArtifact, EngineError>
where
    F: Fn(u32) -> Result<Box<dyn Policy + Send>, AgentError> + Sync,
{
    config.validate()?;
    let one = |r: u32| -> Result<Trajectory, EngineError> {
        let mut policy = make_policy(r).map_err(|e| EngineError::EpisodeAborted {
            replication: r,
            reason: e.to_string(),
            partial: Box::new(Trajectory {
                replication: r,
                events: Vec::new(),
                ledger: FeedLedger::new(config.slate_size as usize),
            }),
        })?;
        run_episode_with(config, r, policy.as_mut())
    };
    let results: Vec<Result<Trajectory, EngineError>> = match exec {
        Execution::Sequential => (0..config.replications).map(one).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..config.replications).into_par_iter().map(one).collect()
        }
    };
    let mut completed = Vec::with_capacity(results.len());
    let mut first_error = None;
    for r in results {
        match r {
            Ok(t) => completed.push(t),
            Err(e) if first_error.is_none() => first_error = Some(e),
            Err(_) => {}
        }
    }
    match first_error {
        None => Ok(RunArtifact::from_trajectories(config.clone(), completed)),
        Some(e) => Err(EngineError::ReplicationsFailed {
            source: Box::new(e),
            completed,
        }),
    }
}

/// Cartesian parameter grid over dotted paths into the serialized config,
/// e.g. `policy.social_proof_boost`. The last axis varies fastest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterGrid {
    pub axes: Vec<(String, Vec<serde_json::Value>)>,
}

impl ParameterGrid {
    pub fn axis(mut self, path: impl Into<String>, values: Vec<serde_json::Value>) -> Self {
        self.axes.push((path.into(), values));
        self
    }

    pub fn cells(&self) -> Vec<Vec<(String, serde_json::Value)>> {
        let mut cells: Vec<Vec<(String, serde_json::Value)>> = vec![Vec::new()];
        for (path, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.push((path.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<(), ConfigError> {
    let mut cur = root;
    for key in path.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| ConfigError::new(format!("unknown sweep parameter `{path}`")))?;
    }
    *cur = value;
    Ok(())
}

/// Config for one grid cell. The cell seed is derived from the cell's
/// assignment, so removing other cells never changes this one.
pub fn cell_config(base: &ExperimentConfig, cell: &[(String, serde_json::Value)]) -> Result<ExperimentConfig, Error> {
    if cell.is_empty() {
        return Ok(base.clone());
    }
    let mut value = serde_json::to_value(base).expect("config serializes");
    let assignment: Vec<String> = cell.iter().map(|(p, v)| format!("{p}={v}")).collect();
    for (path, v) in cell {
        if matches!(path.as_str(), "master_seed" | "condition_label") {
            return Err(ConfigError::new(format!("`{path}` cannot be swept")).into());
        }
        set_path(&mut value, path, v.clone())?;
    }
    let key = assignment.join(";");
    let mut cfg: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| ConfigError::new(format!("sweep cell [{key}]: {e}")))?;
    cfg.condition_label = format!("{}[{}]", base.condition_label, assignment.join(","));
    cfg.master_seed = derive_seed(base.master_seed, &key);
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_sweep(base: &ExperimentConfig, grid: &ParameterGrid) -> Result<Vec<RunArtifact>, Error> {
    let configs = grid
        .cells()
        .iter()
        .map(|c| cell_config(base, c))
        .collect::<Result<Vec<_>, _>>()?;
    configs
        .iter()
        .map(|c| run_experiment(c).map_err(Error::from))
        .collect()
}
