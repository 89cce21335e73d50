use std::collections::{BTreeMap, BTreeSet};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::manifest::{Action, RunManifest, UnknownIdPolicy};
use crate::rule::{parse_literal, FeaturePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionStatus {
    SourceSupported,
    ModelSuggested,
    FeedbackDerived,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPreference {
    pub prefer: Vec<String>,
    pub avoid: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlDelta {
    pub param: String,
    pub delta: f64,
    pub reason: String,
}

/// Controls a planner or the feedback rule may adjust.
pub const CONTROL_PARAMS: [&str; 7] = [
    "population",
    "generations",
    "support_floor",
    "mutation",
    "crossover",
    "injection",
    "tuning_subprob",
];

/// Strategist output: one bounded search intent with provenance status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Direction {
    #[serde(rename = "direction")]
    pub text: String,
    pub status: DirectionStatus,
    pub knowledge_ids: Vec<String>,
    pub grounding_cues: Vec<String>,
    pub target_preference: TargetPreference,
    pub control_adjustment: Vec<ControlDelta>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticMatch {
    pub cue: String,
    pub features: Vec<String>,
    pub windows: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueStatus {
    Matched,
    Partial,
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingEntry {
    pub literal_keys: Vec<String>,
    pub status: CueStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateLiteral {
    pub feature: String,
    pub op: String,
    pub value_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvalidCombination {
    pub cue: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureProposal {
    pub request: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Safety {
    pub uses_forbidden_field: bool,
}

/// Proposer output: the direction's cues mapped onto schema-visible objects.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingPlan {
    pub semantic_matches: Vec<SemanticMatch>,
    pub grounding_map: BTreeMap<String, GroundingEntry>,
    pub candidate_literals: Vec<CandidateLiteral>,
    pub seed_candidates: Vec<Vec<String>>,
    pub invalid_combinations: Vec<InvalidCombination>,
    #[serde(default)]
    pub feature_proposals: Vec<FeatureProposal>,
    #[serde(default)]
    pub safety: Safety,
}

impl GroundingPlan {
    /// Every literal key the plan names, deduplicated.
    pub fn literal_keys(&self) -> BTreeSet<String> {
        self.grounding_map
            .values()
            .flat_map(|e| e.literal_keys.iter().cloned())
            .chain(self.seed_candidates.iter().flatten().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontierStatus {
    Coherent,
    Empty,
    Unstable,
    LowSupport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontierSummary {
    pub status: FrontierStatus,
}

/// Critic output, accepted for archiving; the feedback rule itself is
/// deterministic and never reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticReport {
    pub frontier_summary: FrontierSummary,
    pub failure_modes: Vec<String>,
    pub stability_notes: Vec<String>,
    pub action: Action,
    pub next_direction_hint: String,
    pub control_delta: Vec<ControlDelta>,
    pub memory_update: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactShape {
    Strategist,
    Proposer,
    Critic,
}

impl ArtifactShape {
    fn fields(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            ArtifactShape::Strategist => (
                &[
                    "direction",
                    "status",
                    "knowledge_ids",
                    "grounding_cues",
                    "target_preference",
                    "control_adjustment",
                    "rationale",
                ],
                &[],
            ),
            ArtifactShape::Proposer => (
                &[
                    "semantic_matches",
                    "grounding_map",
                    "candidate_literals",
                    "seed_candidates",
                    "invalid_combinations",
                    "feature_proposals",
                    "safety",
                ],
                &[],
            ),
            ArtifactShape::Critic => (
                &[
                    "frontier_summary",
                    "failure_modes",
                    "stability_notes",
                    "action",
                    "next_direction_hint",
                    "control_delta",
                    "memory_update",
                ],
                &[],
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Artifact {
    Strategist(Direction),
    Proposer(GroundingPlan),
    Critic(CriticReport),
}

/// An accepted artifact with any policy notes (such as a status downgrade).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validated {
    pub artifact: Artifact,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("{shape:?} artifact rejected: {}", reasons.join("; "))]
pub struct RejectedArtifact {
    pub shape: ArtifactShape,
    pub reasons: Vec<String>,
}

/// Keys that would assert statistical or validation success.
const CLAIM_KEYS: [&str; 14] = [
    "p_value",
    "pvalue",
    "q_value",
    "significance",
    "significant",
    "effect",
    "effect_size",
    "validated",
    "validation",
    "validation_status",
    "validation_result",
    "holdout_effect",
    "confidence_interval",
    "test_statistic",
];

const LITERAL_OPS: [&str; 6] = ["<", "<=", ">", ">=", "IN", "MISSING"];

fn scan(v: &Value, path: &str, reasons: &mut Vec<String>) {
    match v {
        Value::Number(n) => {
            if !n.as_f64().is_some_and(f64::is_finite) {
                reasons.push(format!("non_finite:{path}"));
            }
        }
        Value::String(s) => {
            let t = s.trim().to_ascii_lowercase();
            if matches!(t.as_str(), "nan" | "inf" | "+inf" | "-inf" | "infinity" | "+infinity" | "-infinity") {
                reasons.push(format!("non_finite:{path}"));
            }
        }
        Value::Array(xs) => {
            for (i, x) in xs.iter().enumerate() {
                scan(x, &format!("{path}[{i}]"), reasons);
            }
        }
        Value::Object(m) => {
            for (k, x) in m {
                if CLAIM_KEYS.contains(&k.to_ascii_lowercase().as_str()) {
                    reasons.push(format!("validation_claim:{k}"));
                }
                scan(x, &format!("{path}.{k}"), reasons);
            }
        }
        Value::Null | Value::Bool(_) => {}
    }
}

fn typed<T: DeserializeOwned>(v: Value, reasons: &mut Vec<String>) -> Option<T> {
    match serde_json::from_value(v) {
        Ok(t) => Some(t),
        Err(e) => {
            reasons.push(format!("schema:{e}"));
            None
        }
    }
}

/// Visible features and families, plus outputs of any proposed plans.
struct Names<'a> {
    manifest: &'a RunManifest,
    virtuals: BTreeSet<String>,
}

impl Names<'_> {
    fn check_feature(&self, name: &str, reasons: &mut Vec<String>) {
        if self.manifest.is_leaky(name) {
            reasons.push(format!("forbidden_field:{name}"));
        } else if self.manifest.variable(name).is_none() && !self.virtuals.contains(name) {
            reasons.push(format!("unknown_feature:{name}"));
        }
    }

    fn check_preference(&self, name: &str, reasons: &mut Vec<String>) {
        if !self.manifest.schema.iter().any(|v| v.family == name) {
            self.check_feature(name, reasons);
        }
    }

    fn check_literal(&self, key: &str, reasons: &mut Vec<String>) {
        match parse_literal(key) {
            Ok(lit) => self.check_feature(&lit.feature, reasons),
            Err(_) => reasons.push(format!("malformed_literal:{key}")),
        }
    }
}

/// Parses and checks one planner artifact against its closed contract.
///
/// Rejects malformed JSON, a top-level field set other than the contract's,
/// nested unknown fields or wrong types, non-finite numbers (including
/// string spellings), validation-claim keys at any depth, unknown or
/// forbidden feature identifiers, and unknown control parameters. Unknown
/// knowledge ids reject the strategist artifact or, under the downgrade
/// policy, are dropped and the status becomes `model_suggested`.
pub fn validate_artifact(
    raw: &str,
    shape: ArtifactShape,
    manifest: &RunManifest,
) -> Result<Validated, RejectedArtifact> {
    let reject = |reasons: Vec<String>| RejectedArtifact { shape, reasons };
    let value: Value = serde_json::from_str(raw).map_err(|e| reject(vec![format!("malformed_json:{e}")]))?;
    let Value::Object(map) = &value else {
        return Err(reject(vec!["not_an_object".into()]));
    };

    let mut reasons = Vec::new();
    let (required, optional) = shape.fields();
    for k in map.keys() {
        if !required.contains(&k.as_str()) && !optional.contains(&k.as_str()) {
            reasons.push(format!("extra_field:{k}"));
        }
    }
    for k in required {
        if !map.contains_key(*k) {
            reasons.push(format!("missing_field:{k}"));
        }
    }
    scan(&value, "$", &mut reasons);
    if !reasons.is_empty() {
        return Err(reject(reasons));
    }

    let mut notes = Vec::new();
    let artifact = match shape {
        ArtifactShape::Strategist => {
            let Some(mut d) = typed::<Direction>(value, &mut reasons) else {
                return Err(reject(reasons));
            };
            let names = Names {
                manifest,
                virtuals: BTreeSet::new(),
            };
            for p in d.target_preference.prefer.iter().chain(&d.target_preference.avoid) {
                names.check_preference(p, &mut reasons);
            }
            for c in &d.control_adjustment {
                if !CONTROL_PARAMS.contains(&c.param.as_str()) {
                    reasons.push(format!("unknown_control:{}", c.param));
                }
            }
            let known = manifest.knowledge_ids();
            let unknown: Vec<String> = d
                .knowledge_ids
                .iter()
                .filter(|id| !known.contains(id.as_str()))
                .cloned()
                .collect();
            if !unknown.is_empty() {
                match manifest.planner.unknown_id_policy {
                    UnknownIdPolicy::Reject => {
                        reasons.extend(unknown.iter().map(|id| format!("unknown_knowledge_id:{id}")));
                    }
                    UnknownIdPolicy::Downgrade => {
                        d.knowledge_ids.retain(|id| known.contains(id.as_str()));
                        if d.status == DirectionStatus::SourceSupported {
                            d.status = DirectionStatus::ModelSuggested;
                        }
                        notes.push(format!("downgraded: unknown knowledge ids {}", unknown.join(",")));
                    }
                }
            }
            if reasons.is_empty() && d.status == DirectionStatus::SourceSupported && d.knowledge_ids.is_empty() {
                reasons.push("source_supported_without_ids".into());
            }
            Artifact::Strategist(d)
        }
        ArtifactShape::Proposer => {
            let Some(p) = typed::<GroundingPlan>(value, &mut reasons) else {
                return Err(reject(reasons));
            };
            let virtuals = p
                .feature_proposals
                .iter()
                .filter_map(|f| FeaturePlan::parse(&f.request).ok())
                .map(|f| f.output_name())
                .collect();
            let names = Names { manifest, virtuals };
            for m in &p.semantic_matches {
                for f in &m.features {
                    names.check_feature(f, &mut reasons);
                }
                for w in &m.windows {
                    let declared = m
                        .features
                        .iter()
                        .any(|f| manifest.variable(f).is_some_and(|v| v.windows.contains(w)));
                    if !declared {
                        reasons.push(format!("unknown_window:{w}"));
                    }
                }
            }
            for (cue, e) in &p.grounding_map {
                for k in &e.literal_keys {
                    names.check_literal(k, &mut reasons);
                }
                if e.status == CueStatus::Unresolved && !p.invalid_combinations.iter().any(|c| &c.cue == cue) {
                    reasons.push(format!("silently_dropped_cue:{cue}"));
                }
            }
            for c in &p.candidate_literals {
                names.check_feature(&c.feature, &mut reasons);
                if !LITERAL_OPS.contains(&c.op.as_str()) {
                    reasons.push(format!("unknown_operator:{}", c.op));
                }
                if c.value_source != "grid" {
                    reasons.push(format!("value_source:{}", c.value_source));
                }
            }
            for k in p.seed_candidates.iter().flatten() {
                names.check_literal(k, &mut reasons);
            }
            if p.safety.uses_forbidden_field {
                reasons.push("declares_forbidden_use".into());
            }
            Artifact::Proposer(p)
        }
        ArtifactShape::Critic => {
            let Some(c) = typed::<CriticReport>(value, &mut reasons) else {
                return Err(reject(reasons));
            };
            for d in &c.control_delta {
                if !CONTROL_PARAMS.contains(&d.param.as_str()) {
                    reasons.push(format!("unknown_control:{}", d.param));
                }
            }
            Artifact::Critic(c)
        }
    };
    if reasons.is_empty() {
        Ok(Validated { artifact, notes })
    } else {
        reasons.sort();
        reasons.dedup();
        Err(reject(reasons))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::fixtures::{clinical_manifest, proposer, strategist};
    use serde_json::json;

    fn critic() -> Value {
        json!({
            "frontier_summary": {"status": "coherent"},
            "failure_modes": [],
            "stability_notes": ["signs agree"],
            "action": "preserve",
            "next_direction_hint": "keep",
            "control_delta": [],
            "memory_update": {"stable_families": ["lab"]}
        })
    }

    fn check(v: &Value, shape: ArtifactShape) -> Result<Validated, RejectedArtifact> {
        validate_artifact(&v.to_string(), shape, &clinical_manifest())
    }

    #[test]
    fn clean_artifacts_pass_unchanged() {
        let m = clinical_manifest();
        let s = check(&strategist(), ArtifactShape::Strategist).unwrap();
        assert!(s.notes.is_empty());
        let Artifact::Strategist(d) = s.artifact else { panic!() };
        assert_eq!(serde_json::to_value(&d).unwrap(), strategist());
        let p = check(&proposer(), ArtifactShape::Proposer).unwrap();
        let Artifact::Proposer(g) = p.artifact else { panic!() };
        assert_eq!(serde_json::to_value(&g).unwrap(), proposer());
        assert!(check(&critic(), ArtifactShape::Critic).is_ok());
        let _ = m;
    }

    #[test]
    fn extra_claim_field_rejected() {
        let mut p = proposer();
        p["p_value"] = json!(0.01);
        let r = check(&p, ArtifactShape::Proposer).unwrap_err();
        assert!(r.reasons.contains(&"extra_field:p_value".to_string()));
        assert!(r.reasons.contains(&"validation_claim:p_value".to_string()));
    }

    #[test]
    fn unknown_id_follows_policy() {
        let mut s = strategist();
        s["knowledge_ids"] = json!(["k1", "k9"]);
        let mut m = clinical_manifest();
        let r = validate_artifact(&s.to_string(), ArtifactShape::Strategist, &m).unwrap_err();
        assert_eq!(r.reasons, vec!["unknown_knowledge_id:k9"]);

        m.planner.unknown_id_policy = UnknownIdPolicy::Downgrade;
        let v = validate_artifact(&s.to_string(), ArtifactShape::Strategist, &m).unwrap();
        let Artifact::Strategist(d) = v.artifact else { panic!() };
        assert_eq!(d.status, DirectionStatus::ModelSuggested);
        assert_eq!(d.knowledge_ids, vec!["k1"]);
        assert_eq!(v.notes.len(), 1);
    }

    #[test]
    fn structural_and_value_faults() {
        let cases: Vec<(Value, ArtifactShape, &str)> = vec![
            ({ let mut s = strategist(); s.as_object_mut().unwrap().remove("rationale"); s }, ArtifactShape::Strategist, "missing_field:rationale"),
            ({ let mut s = strategist(); s["status"] = json!("proven"); s }, ArtifactShape::Strategist, "schema:"),
            ({ let mut s = strategist(); s["control_adjustment"] = json!([{"param": "population", "delta": "NaN", "reason": "x"}]); s }, ArtifactShape::Strategist, "non_finite:"),
            ({ let mut s = strategist(); s["control_adjustment"] = json!([{"param": "temperature", "delta": 1.0, "reason": "x"}]); s }, ArtifactShape::Strategist, "unknown_control:temperature"),
            ({ let mut s = strategist(); s["target_preference"]["prefer"] = json!(["genomics"]); s }, ArtifactShape::Strategist, "unknown_feature:genomics"),
            ({ let mut p = proposer(); p["seed_candidates"] = json!([["outcome_flag>1"]]); p }, ArtifactShape::Proposer, "forbidden_field:outcome_flag"),
            ({ let mut p = proposer(); p["semantic_matches"][0]["features"] = json!(["weight"]); p }, ArtifactShape::Proposer, "unknown_feature:weight"),
            ({ let mut p = proposer(); p["grounding_map"]["x"] = json!({"literal_keys": [], "status": "unresolved"}); p }, ArtifactShape::Proposer, "silently_dropped_cue:x"),
            ({ let mut p = proposer(); p["safety"]["uses_forbidden_field"] = json!(true); p }, ArtifactShape::Proposer, "declares_forbidden_use"),
            ({ let mut p = proposer(); p["grounding_map"]["metabolic"]["significance"] = json!("high"); p }, ArtifactShape::Proposer, "validation_claim:significance"),
            ({ let mut c = critic(); c["action"] = json!("restart"); c }, ArtifactShape::Critic, "schema:"),
        ];
        for (v, shape, want) in cases {
            let r = check(&v, shape).unwrap_err();
            assert!(r.reasons.iter().any(|x| x.starts_with(want)), "{want}: {:?}", r.reasons);
        }
        assert!(validate_artifact("{not json", ArtifactShape::Critic, &clinical_manifest()).is_err());
        assert!(validate_artifact("[1]", ArtifactShape::Critic, &clinical_manifest()).is_err());
    }

    #[test]
    fn unresolved_cue_listed_is_fine() {
        let mut p = proposer();
        p["grounding_map"]["x"] = json!({"literal_keys": [], "status": "unresolved"});
        p["invalid_combinations"] = json!([{"cue": "x", "reason": "no schema match"}]);
        assert!(check(&p, ArtifactShape::Proposer).is_ok());
    }

    #[test]
    fn virtual_feature_literals_resolve_through_proposals() {
        let mut p = proposer();
        p["feature_proposals"] = json!([{"request": "ratio(glucose,bmi)", "reason": "load"}]);
        p["seed_candidates"] = json!([["ratio__glucose__bmi>0.2"]]);
        assert!(check(&p, ArtifactShape::Proposer).is_ok());
    }
}
