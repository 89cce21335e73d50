use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Column, EvidenceError, EvidenceTable};
use crate::digest::derive_seed;
use crate::manifest::{
    schema_hash, AdapterConfig, ClinicalConfig, ControlBounds, ControllerPolicy, OperatorKind, PlannerConfig,
    RunManifest, ScriptEntry, SearchDefaults, ValidationBoundary, VariableKind, VariableSpec,
};
use crate::rule::parse_rule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticFeature {
    Uniform { name: String, low: f64, high: f64 },
    Levels { name: String, levels: Vec<String> },
}

impl SyntheticFeature {
    pub fn name(&self) -> &str {
        match self {
            SyntheticFeature::Uniform { name, .. } | SyntheticFeature::Levels { name, .. } => name,
        }
    }
}

/// Two-arm cohort with one planted subgroup.
///
/// Control rows have bad-outcome probability `control_bad_rate`; treated
/// rows have `control_bad_rate - inside_effect` inside the planted rule and
/// `control_bad_rate - outside_effect` outside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_rows: usize,
    pub features: Vec<SyntheticFeature>,
    pub planted_rule: String,
    pub inside_effect: f64,
    pub outside_effect: f64,
    pub arm_balance: f64,
    #[serde(default = "d_control_rate")]
    pub control_bad_rate: f64,
    pub outcome_noise_seed: u64,
}

fn d_control_rate() -> f64 {
    0.5
}

pub const TREATMENT_COLUMN: &str = "treatment";
pub const BAD_OUTCOME_COLUMN: &str = "bad_outcome";
pub const ROW_KEY: &str = "row_id";

impl SyntheticConfig {
    /// `n_features` uniform [0, 1] features named `f00`, `f01`, ...
    pub fn uniform_cohort(n_rows: usize, n_features: usize, planted_rule: &str, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_rows,
            features: (0..n_features)
                .map(|i| SyntheticFeature::Uniform {
                    name: format!("f{i:02}"),
                    low: 0.0,
                    high: 1.0,
                })
                .collect(),
            planted_rule: planted_rule.to_string(),
            inside_effect: 0.25,
            outside_effect: 0.0,
            arm_balance: 0.5,
            control_bad_rate: 0.5,
            outcome_noise_seed: seed,
        }
    }

    pub fn schema(&self) -> Vec<VariableSpec> {
        self.features
            .iter()
            .map(|f| match f {
                SyntheticFeature::Uniform { name, .. } => VariableSpec::new(name, VariableKind::Numeric, "baseline"),
                SyntheticFeature::Levels { name, .. } => VariableSpec::new(name, VariableKind::Categorical, "context"),
            })
            .collect()
    }

    fn check(&self) -> Result<(), EvidenceError> {
        let bad = |m: &str| Err(EvidenceError::InvalidConfig(m.to_string()));
        if self.n_rows == 0 {
            return bad("n_rows must be positive");
        }
        if !(0.0..=1.0).contains(&self.arm_balance) || !(0.0..=1.0).contains(&self.control_bad_rate) {
            return bad("arm_balance and control_bad_rate must lie in [0,1]");
        }
        for e in [self.inside_effect, self.outside_effect] {
            if !(0.0..=1.0).contains(&(self.control_bad_rate - e)) {
                return bad("effects imply a treated bad-outcome rate outside [0,1]");
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for f in &self.features {
            if !crate::manifest::is_identifier(f.name()) || !names.insert(f.name()) {
                return bad("feature names must be unique identifiers");
            }
            match f {
                SyntheticFeature::Uniform { low, high, .. } if !(low < high) => return bad("empty uniform range"),
                SyntheticFeature::Levels { levels, .. } if levels.is_empty() => return bad("no levels"),
                _ => {}
            }
        }
        if [TREATMENT_COLUMN, BAD_OUTCOME_COLUMN, ROW_KEY].iter().any(|c| names.contains(c)) {
            return bad("feature name collides with an evaluation column");
        }
        Ok(())
    }
}

/// Generates the cohort and its schema. Features, arms and outcomes are
/// drawn from separate seeded streams.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(EvidenceTable, Vec<VariableSpec>), EvidenceError> {
    config.check()?;
    let rule = parse_rule(&config.planted_rule, usize::MAX)
        .map_err(|e| EvidenceError::InvalidConfig(format!("planted rule: {e}")))?;
    for f in rule.features() {
        if !config.features.iter().any(|s| s.name() == f) {
            return Err(EvidenceError::InvalidConfig(format!("planted rule uses unknown feature `{f}`")));
        }
    }

    let n = config.n_rows;
    let seed = config.outcome_noise_seed;
    let mut feat_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "features"));
    let mut columns: Vec<(String, Column)> = Vec::new();
    for f in &config.features {
        let col = match f {
            SyntheticFeature::Uniform { low, high, .. } => Column::Numeric(
                (0..n)
                    .map(|_| {
                        let x: f64 = feat_rng.random_range(*low..*high);
                        Some((x * 1e4).round() / 1e4)
                    })
                    .collect(),
            ),
            SyntheticFeature::Levels { levels, .. } => Column::Categorical(
                (0..n)
                    .map(|_| Some(levels[feat_rng.random_range(0..levels.len())].clone()))
                    .collect(),
            ),
        };
        columns.push((f.name().to_string(), col));
    }
    let keys: Vec<String> = (0..n).map(|i| format!("r{i:06}")).collect();
    let features = EvidenceTable::new(ROW_KEY, keys.clone(), columns.clone())?;
    let inside = rule
        .mask(&features)
        .map_err(|e| EvidenceError::InvalidConfig(e.to_string()))?;

    let mut arm_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "arms"));
    let mut out_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "outcomes"));
    let mut treatment = Vec::with_capacity(n);
    let mut bad = Vec::with_capacity(n);
    for covered in inside {
        let treated = arm_rng.random_bool(config.arm_balance);
        let effect = if covered { config.inside_effect } else { config.outside_effect };
        let p = if treated { config.control_bad_rate - effect } else { config.control_bad_rate };
        let u: f64 = out_rng.random();
        treatment.push(Some(if treated { 1.0 } else { 0.0 }));
        bad.push(Some(if u < p { 1.0 } else { 0.0 }));
    }
    columns.push((TREATMENT_COLUMN.into(), Column::Numeric(treatment)));
    columns.push((BAD_OUTCOME_COLUMN.into(), Column::Numeric(bad)));
    Ok((EvidenceTable::new(ROW_KEY, keys, columns)?, config.schema()))
}

/// Clinical-trial manifest for a synthetic cohort: all operators on, a
/// one-step scripted planner with a cue-free direction, population 160,
/// 14 generations and support floor 30.
pub fn synthetic_manifest(config: &SyntheticConfig, scenario_id: &str, seed: u64) -> RunManifest {
    let schema = config.schema();
    let mut search = SearchDefaults::new(160, 14, 30);
    search.rounds = 1;
    let strategist = serde_json::json!({
        "direction": "treatment-benefit subgroup over baseline covariates",
        "status": "model_suggested",
        "knowledge_ids": [],
        "grounding_cues": [],
        "target_preference": {"prefer": [], "avoid": []},
        "control_adjustment": [],
        "rationale": "no prior record; open search over the baseline family"
    });
    let proposer = serde_json::json!({
        "semantic_matches": [],
        "grounding_map": {},
        "candidate_literals": [],
        "seed_candidates": [],
        "invalid_combinations": [],
        "feature_proposals": [],
        "safety": {"uses_forbidden_field": false}
    });
    RunManifest {
        scenario_id: scenario_id.to_string(),
        freeze_time: "1970-01-01T00:00:00Z".into(),
        schema_hash: schema_hash(&schema).expect("synthetic schema is nonempty"),
        schema,
        split_id: format!("seed_{seed}"),
        row_key: ROW_KEY.into(),
        knowledge_records: Vec::new(),
        controller_policy: ControllerPolicy::default(),
        control_bounds: ControlBounds::with_floor(30),
        forbidden_tokens: vec!["outcome".into(), "treatment".into()],
        enabled_operators: OperatorKind::ALL.iter().map(|o| o.as_str().to_string()).collect(),
        adapter_id: "clinical_trial".into(),
        adapter: AdapterConfig::ClinicalTrial(ClinicalConfig {
            treatment_column: TREATMENT_COLUMN.into(),
            bad_outcome_column: BAD_OUTCOME_COLUMN.into(),
        }),
        search,
        planner: PlannerConfig::scripted(vec![ScriptEntry { strategist, proposer }]),
        seed,
        final_validation_boundary: ValidationBoundary::default(),
    }
}
