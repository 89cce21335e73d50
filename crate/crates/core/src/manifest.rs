//! Frozen run configuration.
//!
//! A [`RunManifest`] is the single configuration root of a discovery run:
//! schema, prior-knowledge records, controller thresholds, control bounds,
//! leakage blocklist, adapter binding, planner program and seed. It is
//! loaded once, validated field by field, and then only shared by reference.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{canonical_json, sha256_hex};

/// Tokens hard-blocked for perturbational (connectivity) scenarios.
pub const DEFAULT_CONNECTIVITY_TOKENS: &[&str] =
    &["distil_", "tas", "pct_self_rank_q25", "dose_time_exposure"];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("failed to read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid manifest field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("schema is empty")]
    EmptySchema,
}

impl ManifestError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        ManifestError::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Name of the offending field for validation errors.
    pub fn field_name(&self) -> Option<&str> {
        match self {
            ManifestError::Validation { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Numeric,
    Categorical,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    pub family: String,
    #[serde(default)]
    pub windows: Vec<String>,
    #[serde(default)]
    pub forbidden: bool,
    #[serde(default)]
    pub missing_allowed: bool,
}

impl VariableSpec {
    pub fn new(name: &str, kind: VariableKind, family: &str) -> Self {
        VariableSpec {
            name: name.to_string(),
            kind,
            family: family.to_string(),
            windows: Vec::new(),
            forbidden: false,
            missing_allowed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeRecord {
    pub id: String,
    pub statement: String,
    pub source_descriptor: String,
    pub scope: String,
    pub transform: String,
}

/// Next-round action chosen by the feedback rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Replace,
    Broaden,
    Narrow,
    Preserve,
}

impl Action {
    pub const PRIORITY: [Action; 4] =
        [Action::Replace, Action::Broaden, Action::Narrow, Action::Preserve];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Replace => "replace",
            Action::Broaden => "broaden",
            Action::Narrow => "narrow",
            Action::Preserve => "preserve",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        Action::PRIORITY.into_iter().find(|a| a.as_str() == s)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerPolicy {
    #[serde(default = "d_delta_high")]
    pub delta_high: f64,
    #[serde(default = "d_delta_low")]
    pub delta_low: f64,
    #[serde(default = "d_diversity_floor")]
    pub diversity_floor: f64,
    #[serde(default = "d_invalid_ceiling")]
    pub invalid_rate_ceiling: f64,
    #[serde(default = "d_low_support_ceiling")]
    pub low_support_rate_ceiling: f64,
    #[serde(default = "d_lower_patience")]
    pub lower_patience: u32,
    #[serde(default = "d_upper_patience")]
    pub upper_patience: u32,
    #[serde(default = "d_priority")]
    pub action_priority: Vec<Action>,
    /// Broaden retries allowed per direction when its frontier comes back empty.
    #[serde(default = "d_empty_retries")]
    pub empty_frontier_retries: u32,
}

fn d_delta_high() -> f64 {
    0.65
}
fn d_delta_low() -> f64 {
    0.25
}
fn d_diversity_floor() -> f64 {
    0.20
}
fn d_invalid_ceiling() -> f64 {
    0.50
}
fn d_low_support_ceiling() -> f64 {
    0.60
}
fn d_lower_patience() -> u32 {
    5
}
fn d_upper_patience() -> u32 {
    3
}
fn d_priority() -> Vec<Action> {
    Action::PRIORITY.to_vec()
}
fn d_empty_retries() -> u32 {
    1
}

impl Default for ControllerPolicy {
    fn default() -> Self {
        ControllerPolicy {
            delta_high: d_delta_high(),
            delta_low: d_delta_low(),
            diversity_floor: d_diversity_floor(),
            invalid_rate_ceiling: d_invalid_ceiling(),
            low_support_rate_ceiling: d_low_support_ceiling(),
            lower_patience: d_lower_patience(),
            upper_patience: d_upper_patience(),
            action_priority: d_priority(),
            empty_frontier_retries: d_empty_retries(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBounds {
    #[serde(default = "d_pop_range")]
    pub population_range: [u32; 2],
    #[serde(default = "d_gen_range")]
    pub generation_range: [u32; 2],
    #[serde(default = "d_prob_range")]
    pub operator_prob_range: [f64; 2],
    #[serde(default = "d_max_len")]
    pub max_rule_len: usize,
    pub support_floor_min: u32,
}

fn d_pop_range() -> [u32; 2] {
    [40, 320]
}
fn d_gen_range() -> [u32; 2] {
    [5, 40]
}
fn d_prob_range() -> [f64; 2] {
    [0.05, 0.80]
}
fn d_max_len() -> usize {
    3
}

impl ControlBounds {
    pub fn with_floor(support_floor_min: u32) -> Self {
        ControlBounds {
            population_range: d_pop_range(),
            generation_range: d_gen_range(),
            operator_prob_range: d_prob_range(),
            max_rule_len: d_max_len(),
            support_floor_min,
        }
    }
}

/// Variation operators a manifest may enable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Mutation,
    Crossover,
    Tuning,
    Injection,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 4] = [
        OperatorKind::Mutation,
        OperatorKind::Crossover,
        OperatorKind::Tuning,
        OperatorKind::Injection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::Mutation => "mutation",
            OperatorKind::Crossover => "crossover",
            OperatorKind::Tuning => "tuning",
            OperatorKind::Injection => "injection",
        }
    }

    pub fn parse(s: &str) -> Option<OperatorKind> {
        OperatorKind::ALL.into_iter().find(|o| o.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Fixed 90 when the holdout score scale reaches 90, else the holdout
    /// 90th percentile.
    Auto,
    Fixed(f64),
    Percentile(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicalConfig {
    pub treatment_column: String,
    pub bad_outcome_column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectivityConfig {
    pub score_column: String,
    #[serde(default)]
    pub block_column: Option<String>,
    #[serde(default = "d_threshold_mode")]
    pub strong_threshold_mode: ThresholdMode,
    #[serde(default)]
    pub group_column: Option<String>,
    #[serde(default = "d_min_group_cov")]
    pub min_group_coverage: usize,
    #[serde(default = "d_min_group_ratio")]
    pub min_group_coverage_ratio: f64,
    /// Binary retrieval label used for the ensemble AUPRC.
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default = "d_top_k")]
    pub top_k: usize,
}

fn d_threshold_mode() -> ThresholdMode {
    ThresholdMode::Auto
}
fn d_min_group_cov() -> usize {
    12
}
fn d_min_group_ratio() -> f64 {
    0.01
}
fn d_top_k() -> usize {
    20
}

impl ConnectivityConfig {
    pub fn new(score_column: &str) -> Self {
        ConnectivityConfig {
            score_column: score_column.to_string(),
            block_column: None,
            strong_threshold_mode: ThresholdMode::Auto,
            group_column: None,
            min_group_coverage: d_min_group_cov(),
            min_group_coverage_ratio: d_min_group_ratio(),
            label_column: None,
            top_k: d_top_k(),
        }
    }
}

/// Adapter-specific evaluation columns. Externally tagged by adapter id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterConfig {
    ClinicalTrial(ClinicalConfig),
    Connectivity(ConnectivityConfig),
}

impl AdapterConfig {
    pub fn id(&self) -> &'static str {
        match self {
            AdapterConfig::ClinicalTrial(_) => "clinical_trial",
            AdapterConfig::Connectivity(_) => "connectivity",
        }
    }

    /// Columns reserved for evaluation; never rule literals or plan inputs.
    pub fn evaluation_columns(&self) -> Vec<&str> {
        match self {
            AdapterConfig::ClinicalTrial(c) => {
                vec![c.treatment_column.as_str(), c.bad_outcome_column.as_str()]
            }
            AdapterConfig::Connectivity(c) => {
                let mut v = vec![c.score_column.as_str()];
                v.extend(c.block_column.as_deref());
                v.extend(c.group_column.as_deref());
                v.extend(c.label_column.as_deref());
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorMix {
    pub mutation: f64,
    pub crossover: f64,
    pub injection: f64,
}

impl Default for OperatorMix {
    fn default() -> Self {
        OperatorMix {
            mutation: 0.60,
            crossover: 0.25,
            injection: 0.15,
        }
    }
}

/// Default lower-level controls for the first round and split policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchDefaults {
    pub population: u32,
    pub generations: u32,
    pub support_floor: u32,
    #[serde(default)]
    pub operator_mix: OperatorMix,
    #[serde(default = "d_tuning")]
    pub tuning_subprob: f64,
    #[serde(default = "d_grid")]
    pub grid_per_feature: usize,
    #[serde(default = "d_rounds")]
    pub rounds: u32,
    #[serde(default = "d_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub group_column: Option<String>,
    #[serde(default)]
    pub stratify_columns: Vec<String>,
    #[serde(default = "d_pv")]
    pub pseudo_validation_fraction: f64,
}

fn d_tuning() -> f64 {
    0.5
}
fn d_grid() -> usize {
    5
}
fn d_rounds() -> u32 {
    3
}
fn d_holdout() -> f64 {
    0.25
}
fn d_pv() -> f64 {
    0.2
}

impl SearchDefaults {
    pub fn new(population: u32, generations: u32, support_floor: u32) -> Self {
        SearchDefaults {
            population,
            generations,
            support_floor,
            operator_mix: OperatorMix::default(),
            tuning_subprob: d_tuning(),
            grid_per_feature: d_grid(),
            rounds: d_rounds(),
            holdout_fraction: d_holdout(),
            group_column: None,
            stratify_columns: Vec::new(),
            pseudo_validation_fraction: d_pv(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerMode {
    Scripted,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    StrictAbort,
    ScriptedFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownIdPolicy {
    Reject,
    Downgrade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemotePlannerConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "d_retries")]
    pub retries: u32,
    #[serde(default = "d_timeout")]
    pub timeout_secs: u64,
}

fn d_retries() -> u32 {
    1
}
fn d_timeout() -> u64 {
    120
}

/// One scripted planner step: raw strategist and proposer artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub strategist: serde_json::Value,
    pub proposer: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub mode: PlannerMode,
    #[serde(default)]
    pub script: Vec<ScriptEntry>,
    #[serde(default)]
    pub remote: Option<RemotePlannerConfig>,
    #[serde(default = "d_strictness")]
    pub strictness: Strictness,
    #[serde(default = "d_unknown_ids")]
    pub unknown_id_policy: UnknownIdPolicy,
}

fn d_strictness() -> Strictness {
    Strictness::StrictAbort
}
fn d_unknown_ids() -> UnknownIdPolicy {
    UnknownIdPolicy::Reject
}

impl PlannerConfig {
    pub fn scripted(script: Vec<ScriptEntry>) -> Self {
        PlannerConfig {
            mode: PlannerMode::Scripted,
            script,
            remote: None,
            strictness: Strictness::StrictAbort,
            unknown_id_policy: UnknownIdPolicy::Reject,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationBoundary {
    pub visible_to_discovery: bool,
    pub metrics_feed_back: bool,
}

impl Default for ValidationBoundary {
    fn default() -> Self {
        ValidationBoundary {
            visible_to_discovery: false,
            metrics_feed_back: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub scenario_id: String,
    pub freeze_time: String,
    pub schema: Vec<VariableSpec>,
    pub schema_hash: String,
    pub split_id: String,
    pub row_key: String,
    #[serde(default)]
    pub knowledge_records: Vec<KnowledgeRecord>,
    #[serde(default)]
    pub controller_policy: ControllerPolicy,
    pub control_bounds: ControlBounds,
    #[serde(default)]
    pub forbidden_tokens: Vec<String>,
    pub enabled_operators: Vec<String>,
    pub adapter_id: String,
    pub adapter: AdapterConfig,
    pub search: SearchDefaults,
    pub planner: PlannerConfig,
    pub seed: u64,
    pub final_validation_boundary: ValidationBoundary,
}

/// Digest of a schema, invariant under variable order.
pub fn schema_hash(schema: &[VariableSpec]) -> Result<String, ManifestError> {
    if schema.is_empty() {
        return Err(ManifestError::EmptySchema);
    }
    let mut sorted: Vec<&VariableSpec> = schema.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(sha256_hex(canonical_json(&sorted)))
}

/// True iff the variable is flagged forbidden or its name contains any
/// blocklisted token (case-insensitive substring).
pub fn is_forbidden(name: &str, manifest: &RunManifest) -> bool {
    let flagged = manifest
        .schema
        .iter()
        .any(|v| v.name == name && v.forbidden);
    flagged || contains_forbidden_token(name, &manifest.forbidden_tokens)
}

pub fn contains_forbidden_token(name: &str, tokens: &[String]) -> bool {
    let lower = name.to_lowercase();
    tokens
        .iter()
        .filter(|t| !t.is_empty())
        .any(|t| lower.contains(&t.to_lowercase()))
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

impl RunManifest {
    pub fn from_json(text: &str) -> Result<RunManifest, ManifestError> {
        let m: RunManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<RunManifest, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunManifest::from_json(&text)
    }

    /// Canonical serialization; the byte form that gets hashed and written.
    pub fn canonical(&self) -> String {
        canonical_json(self)
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.canonical())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.canonical())
    }

    pub fn variable(&self, name: &str) -> Option<&VariableSpec> {
        self.schema.iter().find(|v| v.name == name)
    }

    pub fn is_forbidden(&self, name: &str) -> bool {
        is_forbidden(name, self)
    }

    pub fn is_evaluation_column(&self, name: &str) -> bool {
        name == self.row_key || self.adapter.evaluation_columns().contains(&name)
    }

    /// Forbidden, evaluation-only, or row-key: may never enter a rule or a
    /// feature plan.
    pub fn is_leaky(&self, name: &str) -> bool {
        self.is_forbidden(name) || self.is_evaluation_column(name)
    }

    pub fn operator_enabled(&self, op: OperatorKind) -> bool {
        self.enabled_operators.iter().any(|o| o == op.as_str())
    }

    pub fn knowledge_ids(&self) -> BTreeSet<&str> {
        self.knowledge_records.iter().map(|k| k.id.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.scenario_id.trim().is_empty() {
            return Err(ManifestError::field("scenario_id", "must be non-empty"));
        }
        if self.freeze_time.trim().is_empty() {
            return Err(ManifestError::field("freeze_time", "must be non-empty"));
        }
        if self.split_id.trim().is_empty() {
            return Err(ManifestError::field("split_id", "must be non-empty"));
        }
        if self.schema.is_empty() {
            return Err(ManifestError::field("schema", "must list at least one variable"));
        }
        let mut names = BTreeSet::new();
        for v in &self.schema {
            if !is_identifier(&v.name) {
                return Err(ManifestError::field("schema", format!("`{}` is not an identifier", v.name)));
            }
            if !names.insert(v.name.as_str()) {
                return Err(ManifestError::field("schema", format!("duplicate variable `{}`", v.name)));
            }
            if v.family.trim().is_empty() {
                return Err(ManifestError::field("schema", format!("`{}` has an empty family", v.name)));
            }
        }
        let expected = schema_hash(&self.schema)?;
        if self.schema_hash != expected {
            return Err(ManifestError::field("schema_hash", "does not match the embedded schema"));
        }
        if !is_identifier(&self.row_key) || names.contains(self.row_key.as_str()) {
            return Err(ManifestError::field("row_key", "must be an identifier outside the schema"));
        }

        let mut ids = BTreeSet::new();
        for k in &self.knowledge_records {
            let fields = [&k.id, &k.statement, &k.source_descriptor, &k.scope, &k.transform];
            if fields.iter().any(|s| s.trim().is_empty()) {
                return Err(ManifestError::field("knowledge_records", format!("record `{}` has an empty field", k.id)));
            }
            if !ids.insert(k.id.as_str()) {
                return Err(ManifestError::field("knowledge_records", format!("duplicate id `{}`", k.id)));
            }
        }

        let p = &self.controller_policy;
        let fractions = [
            ("delta_high", p.delta_high),
            ("delta_low", p.delta_low),
            ("diversity_floor", p.diversity_floor),
            ("invalid_rate_ceiling", p.invalid_rate_ceiling),
            ("low_support_rate_ceiling", p.low_support_rate_ceiling),
        ];
        for (name, x) in fractions {
            if !(0.0..=1.0).contains(&x) {
                return Err(ManifestError::field("controller_policy", format!("{name} must lie in [0,1]")));
            }
        }
        if p.delta_low >= p.delta_high {
            return Err(ManifestError::field("controller_policy", "delta_low must be below delta_high"));
        }
        if p.lower_patience < 1 || p.upper_patience < 1 {
            return Err(ManifestError::field("controller_policy", "patience must be at least 1"));
        }
        if p.action_priority != Action::PRIORITY {
            return Err(ManifestError::field(
                "controller_policy",
                "action_priority must be [replace, broaden, narrow, preserve]",
            ));
        }

        let b = &self.control_bounds;
        if b.population_range[0] == 0 || b.population_range[0] > b.population_range[1] {
            return Err(ManifestError::field("control_bounds", "population_range is empty"));
        }
        if b.generation_range[0] > b.generation_range[1] {
            return Err(ManifestError::field("control_bounds", "generation_range is empty"));
        }
        let [lo, hi] = b.operator_prob_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(ManifestError::field("control_bounds", "operator_prob_range must be a sub-range of [0,1]"));
        }
        if b.max_rule_len < 1 {
            return Err(ManifestError::field("control_bounds", "max_rule_len must be at least 1"));
        }

        let mut seen_ops = BTreeSet::new();
        for op in &self.enabled_operators {
            if OperatorKind::parse(op).is_none() || !seen_ops.insert(op.as_str()) {
                return Err(ManifestError::field("enabled_operators", format!("unknown or repeated operator `{op}`")));
            }
        }

        if self.adapter_id != self.adapter.id() {
            return Err(ManifestError::field("adapter_id", format!("unknown or mismatched adapter `{}`", self.adapter_id)));
        }
        for col in self.adapter.evaluation_columns() {
            if !is_identifier(col) {
                return Err(ManifestError::field("adapter", format!("`{col}` is not an identifier")));
            }
            if let Some(v) = self.variable(col) {
                if !v.forbidden {
                    return Err(ManifestError::field(
                        "adapter",
                        format!("evaluation column `{col}` is a rule-visible schema variable"),
                    ));
                }
            }
        }
        if let AdapterConfig::Connectivity(c) = &self.adapter {
            if !(0.0..=1.0).contains(&c.min_group_coverage_ratio) || c.top_k == 0 {
                return Err(ManifestError::field("adapter", "invalid group coverage ratio or top_k"));
            }
        }

        let s = &self.search;
        if !(s.holdout_fraction > 0.0 && s.holdout_fraction < 1.0) {
            return Err(ManifestError::field("search", "holdout_fraction must lie in (0,1)"));
        }
        if !(s.pseudo_validation_fraction > 0.0 && s.pseudo_validation_fraction < 1.0) {
            return Err(ManifestError::field("search", "pseudo_validation_fraction must lie in (0,1)"));
        }
        if !(0.0..=1.0).contains(&s.tuning_subprob) || s.grid_per_feature == 0 || s.rounds == 0 {
            return Err(ManifestError::field("search", "tuning_subprob, grid_per_feature or rounds out of range"));
        }
        let mix = &s.operator_mix;
        if [mix.mutation, mix.crossover, mix.injection]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err(ManifestError::field("search", "operator_mix entries must be finite and non-negative"));
        }

        match self.planner.mode {
            PlannerMode::Scripted if self.planner.script.is_empty() => {
                return Err(ManifestError::field("planner", "scripted mode needs a non-empty script"));
            }
            PlannerMode::Remote if self.planner.remote.is_none() => {
                return Err(ManifestError::field("planner", "remote mode needs a remote block"));
            }
            _ => {}
        }
        if let Some(r) = &self.planner.remote {
            if r.temperature != 0.0 {
                return Err(ManifestError::field("planner", "remote decoding must use temperature 0"));
            }
        }

        let fvb = &self.final_validation_boundary;
        if fvb.visible_to_discovery {
            return Err(ManifestError::field("final_validation_boundary", "visible_to_discovery must be false"));
        }
        if fvb.metrics_feed_back {
            return Err(ManifestError::field("final_validation_boundary", "metrics_feed_back must be false"));
        }
        Ok(())
    }
}
