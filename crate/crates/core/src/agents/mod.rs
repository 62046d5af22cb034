//! Agent policies: the decision contract and the built-in parametric rules.
//!
//! The position-gated policy is a two-stage rule. Displayed rank first fixes
//! the effective choice set (a hard gate of the top `gate_size` slots with
//! exponential decay inside it), then visible endorsement counts rescale
//! weights within that set. Items outside the gate get weight exactly zero,
//! so no amount of social proof can select them.

pub mod adapter;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ConfigError;
use crate::feed::{ItemId, ObservedSlate, Rank, SlateEntry};
use crate::rng::Stream;

pub use adapter::{ChannelTransport, CommandTransport, ExternalPolicy, Transport};

/// Endorsed item ids, in the order they were drawn.
pub type Decision = Vec<ItemId>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("every candidate weight is zero")]
    ZeroWeight,
    #[error("replay step {step} out of range for trace of length {len}")]
    OutOfRange { step: usize, len: usize },
    #[error("adapter timed out after {0} ms")]
    Timeout(u64),
    #[error("malformed adapter response: {0}")]
    MalformedResponse(String),
    #[error("adapter transport failed: {0}")]
    Transport(String),
}

/// One past decision of the observing agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub round: u32,
    pub endorse: Vec<ItemId>,
    pub ranks: Vec<Rank>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub slate: ObservedSlate,
    /// Most recent last. Empty for stateless agents.
    pub history: Vec<HistoryRecord>,
}

impl AgentObservation {
    pub fn stateless(slate: ObservedSlate) -> Self {
        AgentObservation {
            slate,
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TurnContext {
    pub round: u32,
    /// Position of this turn in the episode's event log.
    pub turn_index: usize,
    pub agent_id: u32,
}

/// Anything that maps an observation to endorsements.
pub trait Policy {
    fn decide(
        &mut self,
        ctx: &TurnContext,
        obs: &AgentObservation,
        stream: &mut Stream,
    ) -> Result<Decision, AgentError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    pub gate_size: u32,
    pub temperature: f64,
    pub social_proof_boost: f64,
    #[serde(default)]
    pub magnitude_slope: f64,
    #[serde(default = "default_budget")]
    pub budget: u32,
    /// Weight given to ranks beyond the gate. Zero is the hard gate.
    #[serde(default)]
    pub soft_gate_epsilon: f64,
}

fn default_budget() -> u32 {
    1
}

impl PolicyParams {
    pub fn gated(gate_size: u32, temperature: f64, social_proof_boost: f64) -> Self {
        PolicyParams {
            gate_size,
            temperature,
            social_proof_boost,
            magnitude_slope: 0.0,
            budget: 1,
            soft_gate_epsilon: 0.0,
        }
    }

    pub fn validate(&self, slate_size: usize) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        if self.gate_size == 0 {
            v.push("gate_size must be positive".to_string());
        }
        if self.gate_size as usize > slate_size {
            v.push(format!(
                "gate_size {} exceeds slate size {slate_size}",
                self.gate_size
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            v.push("temperature must be positive and finite".to_string());
        }
        if !(self.social_proof_boost >= 0.0 && self.social_proof_boost.is_finite()) {
            v.push("social_proof_boost must be non-negative and finite".to_string());
        }
        if !self.magnitude_slope.is_finite() {
            v.push("magnitude_slope must be finite".to_string());
        }
        if self.budget == 0 {
            v.push("budget must be positive".to_string());
        }
        if self.budget > self.gate_size {
            v.push(format!(
                "budget {} exceeds gate_size {}",
                self.budget, self.gate_size
            ));
        }
        if !(self.soft_gate_epsilon >= 0.0 && self.soft_gate_epsilon.is_finite()) {
            v.push("soft_gate_epsilon must be non-negative and finite".to_string());
        }
        ConfigError::from_violations(v)
    }

    /// Positional weight `exp(-(r-1)/τ)` inside the gate, `ε` beyond it.
    pub fn position_weight(&self, rank: Rank) -> f64 {
        if rank <= self.gate_size {
            (-((rank - 1) as f64) / self.temperature).exp()
        } else {
            self.soft_gate_epsilon
        }
    }

    /// Social-proof multiplier `1 + β·[c > 0] + σ·c`, floored at zero.
    /// Hidden counts leave the weight unmodulated.
    pub fn proof_multiplier(&self, visible_count: Option<u64>) -> f64 {
        match visible_count {
            None => 1.0,
            Some(c) => {
                let indicator = if c > 0 { 1.0 } else { 0.0 };
                (1.0 + self.social_proof_boost * indicator + self.magnitude_slope * c as f64)
                    .max(0.0)
            }
        }
    }

    pub fn weight(&self, entry: &SlateEntry) -> f64 {
        self.position_weight(entry.rank) * self.proof_multiplier(entry.visible_count)
    }
}

/// Draws `k` distinct entries with probability proportional to `weights`,
/// renormalising after each draw. Candidates are scanned in order of
/// descending weight, ties by ascending item id; each draw consumes one
/// `next_f64`.
pub fn sample_weighted_without_replacement(
    entries: &[SlateEntry],
    weights: &[f64],
    k: usize,
    stream: &mut Stream,
) -> Result<Decision, AgentError> {
    let mut candidates: Vec<(f64, ItemId)> = entries
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(e, &w)| (w, e.item_id))
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        if candidates.is_empty() {
            return Err(AgentError::ZeroWeight);
        }
        let total: f64 = candidates.iter().map(|c| c.0).sum();
        let target = stream.next_f64() * total;
        let mut acc = 0.0;
        let mut pick = candidates.len() - 1;
        for (i, c) in candidates.iter().enumerate() {
            acc += c.0;
            if target < acc {
                pick = i;
                break;
            }
        }
        chosen.push(candidates.remove(pick).1);
    }
    Ok(chosen)
}

pub fn decide_position_gated(
    params: &PolicyParams,
    obs: &AgentObservation,
    stream: &mut Stream,
) -> Result<Decision, AgentError> {
    let entries = &obs.slate.entries;
    if entries.is_empty() {
        return Err(ConfigError::new("cannot decide on an empty slate").into());
    }
    if params.budget > params.gate_size {
        return Err(ConfigError::new(format!(
            "budget {} exceeds gate_size {}",
            params.budget, params.gate_size
        ))
        .into());
    }
    let weights: Vec<f64> = entries.iter().map(|e| params.weight(e)).collect();
    let k = (params.budget as usize).min(entries.len());
    sample_weighted_without_replacement(entries, &weights, k, stream)
}

/// Null-model baseline: `k` items uniformly without replacement (partial
/// Fisher–Yates over displayed order, one `below` per pick).
pub fn decide_uniform_random(
    obs: &AgentObservation,
    stream: &mut Stream,
    k: u32,
) -> Result<Decision, AgentError> {
    let mut ids: Vec<ItemId> = obs.slate.entries.iter().map(|e| e.item_id).collect();
    let k = k as usize;
    if k > ids.len() {
        return Err(ConfigError::new(format!(
            "budget {k} exceeds slate size {}",
            ids.len()
        ))
        .into());
    }
    for i in 0..k {
        let j = i + stream.below((ids.len() - i) as u64) as usize;
        ids.swap(i, j);
    }
    ids.truncate(k);
    Ok(ids)
}

pub fn decide_replay(trace: &[Decision], step: usize) -> Result<Decision, AgentError> {
    trace.get(step).cloned().ok_or(AgentError::OutOfRange {
        step,
        len: trace.len(),
    })
}

#[derive(Debug, Clone)]
pub struct PositionGated(pub PolicyParams);

impl Policy for PositionGated {
    fn decide(
        &mut self,
        _ctx: &TurnContext,
        obs: &AgentObservation,
        stream: &mut Stream,
    ) -> Result<Decision, AgentError> {
        decide_position_gated(&self.0, obs, stream)
    }
}

#[derive(Debug, Clone)]
pub struct UniformRandom {
    pub budget: u32,
}

impl Policy for UniformRandom {
    fn decide(
        &mut self,
        _ctx: &TurnContext,
        obs: &AgentObservation,
        stream: &mut Stream,
    ) -> Result<Decision, AgentError> {
        decide_uniform_random(obs, stream, self.budget)
    }
}

/// Replays recorded decisions verbatim, indexed by turn position.
#[derive(Debug, Clone)]
pub struct Replay {
    pub trace: Vec<Decision>,
}

impl Policy for Replay {
    fn decide(
        &mut self,
        ctx: &TurnContext,
        _obs: &AgentObservation,
        _stream: &mut Stream,
    ) -> Result<Decision, AgentError> {
        decide_replay(&self.trace, ctx.turn_index)
    }
}

/// Always endorses whatever sits in the top slot.
#[derive(Debug, Clone, Copy, Default)]
pub struct TopSlot;

impl Policy for TopSlot {
    fn decide(
        &mut self,
        _ctx: &TurnContext,
        obs: &AgentObservation,
        _stream: &mut Stream,
    ) -> Result<Decision, AgentError> {
        Ok(obs.slate.entries.first().map(|e| vec![e.item_id]).unwrap_or_default())
    }
}

/// Serializable policy choice, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    PositionGated {
        gate_size: u32,
        temperature: f64,
        social_proof_boost: f64,
        #[serde(default)]
        magnitude_slope: f64,
        #[serde(default = "default_budget")]
        budget: u32,
        #[serde(default)]
        soft_gate_epsilon: f64,
    },
    UniformRandom {
        #[serde(default = "default_budget")]
        budget: u32,
    },
    External {
        command: Vec<String>,
        #[serde(default = "adapter::default_timeout_ms")]
        timeout_ms: u64,
    },
}

impl PolicySpec {
    pub fn gated(params: PolicyParams) -> Self {
        PolicySpec::PositionGated {
            gate_size: params.gate_size,
            temperature: params.temperature,
            social_proof_boost: params.social_proof_boost,
            magnitude_slope: params.magnitude_slope,
            budget: params.budget,
            soft_gate_epsilon: params.soft_gate_epsilon,
        }
    }

    pub fn params(&self) -> Option<PolicyParams> {
        match *self {
            PolicySpec::PositionGated {
                gate_size,
                temperature,
                social_proof_boost,
                magnitude_slope,
                budget,
                soft_gate_epsilon,
            } => Some(PolicyParams {
                gate_size,
                temperature,
                social_proof_boost,
                magnitude_slope,
                budget,
                soft_gate_epsilon,
            }),
            _ => None,
        }
    }

    pub fn validate(&self, slate_size: usize) -> Result<(), ConfigError> {
        match self {
            PolicySpec::PositionGated { .. } => self.params().expect("gated").validate(slate_size),
            PolicySpec::UniformRandom { budget } => {
                let mut v = Vec::new();
                if *budget == 0 {
                    v.push("budget must be positive".to_string());
                }
                if *budget as usize > slate_size {
                    v.push(format!("budget {budget} exceeds slate size {slate_size}"));
                }
                ConfigError::from_violations(v)
            }
            PolicySpec::External {
                command,
                timeout_ms,
            } => {
                let mut v = Vec::new();
                if command.is_empty() {
                    v.push("external policy requires a command".to_string());
                }
                if *timeout_ms == 0 {
                    v.push("timeout_ms must be positive".to_string());
                }
                ConfigError::from_violations(v)
            }
        }
    }

    pub fn instantiate(&self) -> Result<Box<dyn Policy + Send>, AgentError> {
        Ok(match self {
            PolicySpec::PositionGated { .. } => {
                Box::new(PositionGated(self.params().expect("gated")))
            }
            PolicySpec::UniformRandom { budget } => Box::new(UniformRandom { budget: *budget }),
            PolicySpec::External {
                command,
                timeout_ms,
            } => Box::new(ExternalPolicy::new(
                Box::new(CommandTransport::spawn(command)?),
                std::time::Duration::from_millis(*timeout_ms),
            )),
        })
    }
}
