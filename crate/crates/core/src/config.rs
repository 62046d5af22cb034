//! Experiment config documents.
//!
//! A document is a JSON object holding one base experiment plus an optional
//! `conditions` list. Each condition replaces the visibility regime (and
//! optionally the snapshot rule) of the base and yields its own
//! [`ExperimentConfig`]. Parsing is strict: every missing required field and
//! every unknown field is reported with its path before any typed
//! deserialization happens.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::agents::PolicySpec;
use crate::architecture::{InteractionArchitecture, Snapshot, VisibilityKind, VisibilityRegime};
use crate::engine::ExperimentConfig;
use crate::interventions::Intervention;
use crate::metrics::DetectorSpec;
use crate::error::{ConfigError, Error};
use crate::validation::{Statistic, DEFAULT_RESAMPLES};

pub const SCHEMA_VERSION: &str = "1";
pub const SEED_ENV: &str = "MICROPHYS_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub label: String,
    pub visibility: VisibilityRegime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Snapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default = "default_statistic")]
    pub statistic: Statistic,
    /// Observational pass threshold on the distance statistic.
    pub max_distance: f64,
    #[serde(default = "default_resamples")]
    pub resamples: u32,
}

fn default_statistic() -> Statistic {
    Statistic::Tvd
}

fn default_resamples() -> u32 {
    DEFAULT_RESAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub schema_version: String,
    pub condition_label: String,
    pub slate_size: u32,
    pub architecture: InteractionArchitecture,
    pub policy: PolicySpec,
    pub interventions: Vec<Intervention>,
    pub detectors: Vec<DetectorSpec>,
    pub replications: u32,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<ConditionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationSpec>,
}

impl ConfigDocument {
    /// Single-condition document echoing one config.
    pub fn from_config(config: &ExperimentConfig) -> Self {
        ConfigDocument {
            schema_version: SCHEMA_VERSION.to_string(),
            condition_label: config.condition_label.clone(),
            slate_size: config.slate_size,
            architecture: config.architecture.clone(),
            policy: config.policy.clone(),
            interventions: config.interventions.clone(),
            detectors: config.detectors.clone(),
            replications: config.replications,
            master_seed: config.master_seed,
            conditions: Vec::new(),
            validation: None,
        }
    }

    pub fn base(&self) -> ExperimentConfig {
        ExperimentConfig {
            condition_label: self.condition_label.clone(),
            slate_size: self.slate_size,
            architecture: self.architecture.clone(),
            policy: self.policy.clone(),
            interventions: self.interventions.clone(),
            detectors: self.detectors.clone(),
            replications: self.replications,
            master_seed: self.master_seed,
        }
    }

    /// Expands the document into one config per condition, or the base config
    /// alone when no conditions are listed.
    pub fn configs(&self) -> Vec<ExperimentConfig> {
        let base = self.base();
        if self.conditions.is_empty() {
            return vec![base];
        }
        self.conditions
            .iter()
            .map(|c| {
                let mut cfg = base.clone();
                cfg.condition_label = c.label.clone();
                cfg.architecture.visibility = c.visibility.clone();
                if let Some(s) = c.snapshot {
                    cfg.architecture.turns.snapshot = s;
                }
                cfg
            })
            .collect()
    }

    /// Pretty JSON with every defaulted field written out.
    pub fn to_normalized_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("document serializes");
        s.push('\n');
        s
    }
}

// ---- strict schema walk ----

enum Shape {
    Leaf,
    Obj(&'static [Field]),
    Arr(&'static Shape),
    /// Object discriminated by a string field.
    Tagged(&'static str, &'static [(&'static str, &'static [Field])]),
    /// Either a bare array or `{"round_robin": [...]}`.
    Levels,
}

struct Field(&'static str, bool, &'static Shape);

static LEAF: Shape = Shape::Leaf;
static LEAVES: Shape = Shape::Arr(&LEAF);
static RANGE: Shape = Shape::Obj(&[Field("start", true, &LEAF), Field("end", false, &LEAF)]);
static PIN: Shape = Shape::Obj(&[Field("item", true, &LEAF), Field("slot", true, &LEAF)]);
static PINS: Shape = Shape::Arr(&PIN);
static LEVELS: Shape = Shape::Levels;

static VISIBILITY: Shape = Shape::Obj(&[
    Field("kind", true, &LEAF),
    Field("latency_rounds", false, &LEAF),
    Field("seeded_levels", false, &LEVELS),
]);
static TURNS: Shape = Shape::Obj(&[
    Field("mode", true, &LEAF),
    Field("ordering", true, &LEAF),
    Field("snapshot", false, &LEAF),
]);
static MEMORY: Shape = Shape::Obj(&[Field("kind", true, &LEAF), Field("window", false, &LEAF)]);
static ARCHITECTURE: Shape = Shape::Obj(&[
    Field("visibility", true, &VISIBILITY),
    Field("turns", true, &TURNS),
    Field("memory", true, &MEMORY),
    Field("communication", false, &LEAF),
    Field("agents_per_round", true, &LEAF),
    Field("rounds", true, &LEAF),
]);
static POLICY: Shape = Shape::Tagged(
    "kind",
    &[
        (
            "position_gated",
            &[
                Field("gate_size", true, &LEAF),
                Field("temperature", true, &LEAF),
                Field("social_proof_boost", true, &LEAF),
                Field("magnitude_slope", false, &LEAF),
                Field("budget", false, &LEAF),
                Field("soft_gate_epsilon", false, &LEAF),
            ],
        ),
        ("uniform_random", &[Field("budget", false, &LEAF)]),
        (
            "external",
            &[Field("command", true, &LEAVES), Field("timeout_ms", false, &LEAF)],
        ),
    ],
);
static INTERVENTION: Shape = Shape::Tagged(
    "kind",
    &[
        (
            "pin_ranking",
            &[Field("pins", true, &PINS), Field("active_rounds", false, &RANGE)],
        ),
        (
            "mask_signals",
            &[Field("items", true, &LEAVES), Field("active_rounds", false, &RANGE)],
        ),
        (
            "cap_magnitude",
            &[Field("cap", true, &LEAF), Field("active_rounds", false, &RANGE)],
        ),
    ],
);
static INTERVENTIONS: Shape = Shape::Arr(&INTERVENTION);
static DETECTOR: Shape = Shape::Tagged(
    "name",
    &[
        (
            "herding",
            &[Field("top_k", false, &LEAF), Field("se_multiple", false, &LEAF)],
        ),
        (
            "concentration",
            &[Field("axis", false, &LEAF), Field("threshold", true, &LEAF)],
        ),
    ],
);
static DETECTORS: Shape = Shape::Arr(&DETECTOR);
static CONDITION: Shape = Shape::Obj(&[
    Field("label", true, &LEAF),
    Field("visibility", true, &VISIBILITY),
    Field("snapshot", false, &LEAF),
]);
static CONDITIONS: Shape = Shape::Arr(&CONDITION);
static VALIDATION: Shape = Shape::Obj(&[
    Field("reference", false, &LEAF),
    Field("statistic", false, &LEAF),
    Field("max_distance", true, &LEAF),
    Field("resamples", false, &LEAF),
]);
static DOCUMENT: Shape = Shape::Obj(&[
    Field("schema_version", true, &LEAF),
    Field("condition_label", true, &LEAF),
    Field("slate_size", true, &LEAF),
    Field("architecture", true, &ARCHITECTURE),
    Field("policy", true, &POLICY),
    Field("interventions", false, &INTERVENTIONS),
    Field("detectors", false, &DETECTORS),
    Field("replications", true, &LEAF),
    Field("master_seed", true, &LEAF),
    Field("conditions", false, &CONDITIONS),
    Field("validation", false, &VALIDATION),
]);

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn display(path: &str) -> &str {
    if path.is_empty() {
        "<document>"
    } else {
        path
    }
}

fn walk_fields(map: &Map<String, Value>, fields: &[Field], skip: Option<&str>, path: &str, out: &mut Vec<String>) {
    for Field(name, required, shape) in fields {
        match map.get(*name) {
            Some(v) => walk(v, shape, &join(path, name), out),
            None if *required => out.push(format!("{}: missing required field", join(path, name))),
            None => {}
        }
    }
    for key in map.keys() {
        if Some(key.as_str()) != skip && !fields.iter().any(|f| f.0 == key) {
            out.push(format!("{}: unknown field", join(path, key)));
        }
    }
}

fn walk(v: &Value, shape: &Shape, path: &str, out: &mut Vec<String>) {
    match shape {
        Shape::Leaf => {}
        Shape::Obj(fields) => match v {
            Value::Object(map) => walk_fields(map, fields, None, path, out),
            _ => out.push(format!("{}: expected an object", display(path))),
        },
        Shape::Arr(inner) => match v {
            Value::Array(items) => {
                for (i, item) in items.iter().enumerate() {
                    walk(item, inner, &format!("{path}[{i}]"), out);
                }
            }
            _ => out.push(format!("{path}: expected an array")),
        },
        Shape::Tagged(tag, variants) => {
            let Value::Object(map) = v else {
                out.push(format!("{path}: expected an object"));
                return;
            };
            let tag_path = join(path, tag);
            match map.get(*tag) {
                None => out.push(format!("{tag_path}: missing required field")),
                Some(Value::String(t)) => match variants.iter().find(|(n, _)| n == t) {
                    Some((_, fields)) => walk_fields(map, fields, Some(tag), path, out),
                    None => {
                        let names: Vec<_> = variants.iter().map(|(n, _)| *n).collect();
                        out.push(format!("{tag_path}: unknown variant `{t}`, expected one of {}", names.join(", ")));
                    }
                },
                Some(_) => out.push(format!("{tag_path}: expected a string")),
            }
        }
        Shape::Levels => match v {
            Value::Array(_) | Value::Null => {}
            Value::Object(map) => walk_fields(map, &[Field("round_robin", true, &LEAVES)], None, path, out),
            _ => out.push(format!("{path}: expected an array or {{\"round_robin\": [...]}}")),
        },
    }
}

fn schema_violations(doc: &Value) -> Vec<String> {
    let mut out = Vec::new();
    walk(doc, &DOCUMENT, "", &mut out);
    out
}

/// Fills each omitted `snapshot` with the default for its visibility kind.
fn default_snapshots(doc: &mut Value) {
    let kind_of = |vis: &Value| -> Option<VisibilityKind> {
        serde_json::from_value(vis.get("kind")?.clone()).ok()
    };
    let base_kind = doc.pointer("/architecture/visibility").and_then(kind_of);
    let base_explicit = doc.pointer("/architecture/turns/snapshot").cloned();
    if let Some(Value::Array(conds)) = doc.get_mut("conditions") {
        for c in conds.iter_mut() {
            let Some(kind) = c.get("visibility").and_then(kind_of) else { continue };
            if let Value::Object(m) = c {
                if !m.contains_key("snapshot") {
                    let s = base_explicit
                        .clone()
                        .unwrap_or_else(|| serde_json::to_value(Snapshot::default_for(kind)).unwrap());
                    m.insert("snapshot".into(), s);
                }
            }
        }
    }
    if let (Some(kind), Some(Value::Object(turns))) = (base_kind, doc.pointer_mut("/architecture/turns")) {
        turns
            .entry("snapshot")
            .or_insert_with(|| serde_json::to_value(Snapshot::default_for(kind)).unwrap());
    }
    for key in ["interventions", "detectors"] {
        if let Value::Object(m) = doc {
            m.entry(key).or_insert_with(|| Value::Array(Vec::new()));
        }
    }
}

/// Parses and fully validates a document. Whitespace-only input counts as
/// the empty object, so it reports every missing required field.
pub fn parse_document(text: &str) -> Result<ConfigDocument, Error> {
    let mut value: Value = if text.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?
    };
    let violations = schema_violations(&value);
    if !violations.is_empty() {
        return Err(ConfigError { violations }.into());
    }
    default_snapshots(&mut value);
    let doc: ConfigDocument = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(format!("{}: {}", if path == "." { "<document>" } else { &path }, e.inner()))
    })?;
    let mut violations = Vec::new();
    if doc.schema_version != SCHEMA_VERSION {
        violations.push(format!(
            "schema_version: unsupported version `{}` (expected `{SCHEMA_VERSION}`)",
            doc.schema_version
        ));
    }
    let configs = doc.configs();
    for c in &configs {
        if let Err(e) = c.validate() {
            let prefix = if doc.conditions.is_empty() {
                String::new()
            } else {
                format!("conditions[{}]: ", c.condition_label)
            };
            violations.extend(e.violations.into_iter().map(|m| format!("{prefix}{m}")));
        }
    }
    let mut labels: Vec<&str> = configs.iter().map(|c| c.condition_label.as_str()).collect();
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        violations.push("conditions: labels must be unique".into());
    }
    if let Some(v) = &doc.validation {
        if !(v.max_distance.is_finite() && v.max_distance >= 0.0) {
            violations.push("validation.max_distance must be a non-negative number".into());
        }
        if v.resamples == 0 {
            violations.push("validation.resamples must be positive".into());
        }
    }
    ConfigError::from_violations(violations)?;
    Ok(doc)
}

pub fn parse_config(text: &str) -> Result<Vec<ExperimentConfig>, Error> {
    parse_document(text).map(|d| d.configs())
}

pub fn normalize(text: &str) -> Result<String, Error> {
    parse_document(text).map(|d| d.to_normalized_json())
}

/// Resolves the master seed with precedence flag > environment > file.
pub fn resolve_seed(file: u64, flag: Option<u64>, env: Option<&str>) -> Result<u64, ConfigError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| ConfigError::new(format!("{SEED_ENV}: `{v}` is not a 64-bit unsigned integer"))),
        None => Ok(file),
    }
}

pub fn seed_from_env() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}
