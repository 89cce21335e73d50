//! The export boundary: evidence records, the reporting predicate, the
//! proposition archive, and validation-partition knowledge cards.

mod cards;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::BlockingStatus;
use crate::controller::{Direction, DirectionStatus, GroundingEntry, GroundingPlan};
use crate::digest::{digest_of, pretty_json};
use crate::manifest::{RunManifest, VariableKind};
use crate::rule::{parse_rule, FittedPlan, LiteralForm, Rule};
use crate::search::{pareto_ranks, Candidate, Origin};

pub use cards::{build_cards, CardConfig, CardVariant, KnowledgeCard};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("writing {0}: {1}")]
    Write(String, std::io::Error),
    #[error("reading {0}: {1}")]
    Read(String, std::io::Error),
    #[error("archive is not valid JSON: {0}")]
    Parse(String),
    #[error("no card survives the filters")]
    NoSurvivingCards,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoValidationStatus {
    SignAgrees,
    SignFlips,
    Unscorable,
}

/// Everything needed to re-check and replay one exported rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub round: u32,
    pub effect: f64,
    pub support: usize,
    pub coverage: f64,
    pub support_floor: u32,
    pub diagnostics: BTreeMap<String, f64>,
    pub blocking_status: Option<BlockingStatus>,
    pub pseudo_validation_effect: Option<f64>,
    pub pseudo_validation_status: PseudoValidationStatus,
    pub parsimony_demoted: bool,
    pub validity_reasons: Vec<String>,
    pub direction_status: DirectionStatus,
    pub knowledge_ids: Vec<String>,
    /// Grounding-map entries whose literal keys appear in the rule.
    pub grounding: BTreeMap<String, GroundingEntry>,
    pub origin: Origin,
    pub generation: u32,
    /// Fitted plans for every derived feature the rule mentions.
    pub plans: Vec<FittedPlan>,
    pub split_id: String,
    pub manifest_digest: String,
    pub schema_hash: String,
    pub xi_digest: String,
    pub grounding_digest: String,
    pub log_digest: String,
    pub no_leak: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleRef {
    pub text: String,
    pub semantic_key: String,
}

/// The exported triple plus a digest over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposition {
    pub direction: Direction,
    pub rule: RuleRef,
    pub evidence: EvidenceRecord,
    pub digest: String,
}

impl Proposition {
    pub fn new(direction: Direction, rule: RuleRef, evidence: EvidenceRecord) -> Proposition {
        let digest = digest_of(&(&direction, &rule, &evidence));
        Proposition {
            direction,
            rule,
            evidence,
            digest,
        }
    }

    pub fn digest_matches(&self) -> bool {
        digest_of(&(&self.direction, &self.rule, &self.evidence)) == self.digest
    }

    pub fn parse_rule(&self, manifest: &RunManifest) -> Option<Rule> {
        parse_rule(&self.rule.text, manifest.control_bounds.max_rule_len).ok()
    }

    /// Ranking score used for export ordering.
    pub fn score(&self) -> f64 {
        self.evidence.effect * (self.evidence.support as f64).sqrt()
    }
}

/// Diagnostic keys every exported record must carry.
pub const REQUIRED_DIAGNOSTICS: [&str; 5] = ["effect", "support", "coverage", "pareto_rank", "diagnostic_contrast"];

/// Sub-rule score ratio at or above which a longer frontier rule is demoted.
pub const PARSIMONY_RATIO: f64 = 0.97;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub reasons: Vec<String>,
}

/// No literal feature and no materialization input is forbidden or
/// evaluation-only, every derived feature has a stored plan, and the split
/// lineage matches the manifest.
pub fn no_leak(rule: &Rule, plans: &[FittedPlan], split_id: &str, manifest: &RunManifest) -> bool {
    if split_id != manifest.split_id {
        return false;
    }
    let plan_ok = |p: &FittedPlan| {
        !manifest.is_leaky(&p.output)
            && p.inputs.iter().chain(&p.plan.inputs).all(|i| !manifest.is_leaky(i))
            && p.plan.arg.as_deref().is_none_or(|a| !manifest.is_leaky(a))
    };
    rule.literals().iter().all(|l| {
        if manifest.is_leaky(&l.feature) {
            return false;
        }
        if manifest.variable(&l.feature).is_some() {
            return true;
        }
        plans.iter().any(|p| p.output == l.feature && plan_ok(p))
    }) && plans.iter().all(plan_ok)
}

/// Grid-free validity checks that can be repeated offline from the archive
/// and manifest alone.
pub fn structural_validity(rule: &Rule, plans: &[FittedPlan], manifest: &RunManifest) -> Vec<String> {
    let mut reasons = Vec::new();
    if rule.is_empty() || rule.len() > manifest.control_bounds.max_rule_len {
        reasons.push("length".to_string());
    }
    if rule.has_duplicate() {
        reasons.push("duplicate_literal".to_string());
    }
    for lit in rule.literals() {
        let kind = match manifest.variable(&lit.feature) {
            Some(v) => Some(v.kind),
            None => plans.iter().find(|p| p.output == lit.feature).map(|p| p.kind),
        };
        let Some(kind) = kind else {
            reasons.push("unknown_feature".to_string());
            continue;
        };
        let type_ok = match &lit.form {
            LiteralForm::Threshold { .. } => kind == VariableKind::Numeric,
            LiteralForm::Membership(_) => kind != VariableKind::Numeric,
            LiteralForm::Missingness(_) => true,
        };
        if !type_ok {
            reasons.push("type".to_string());
        }
    }
    reasons.sort();
    reasons.dedup();
    reasons
}

fn is_hex64(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Export gate for one proposition: frontier membership, validity,
/// support, provenance, leakage, and diagnostics. Every failing check is
/// listed.
pub fn reporting_predicate(
    p: &Proposition,
    frontier_keys: &BTreeSet<String>,
    support_floor: u32,
    manifest: &RunManifest,
) -> Verdict {
    let mut reasons = Vec::new();
    let e = &p.evidence;
    let rule = p.parse_rule(manifest);

    if !frontier_keys.contains(&p.rule.semantic_key) {
        reasons.push("frontier");
    }
    let valid = match &rule {
        Some(r) => {
            r.canonical_key() == p.rule.semantic_key
                && e.validity_reasons.is_empty()
                && structural_validity(r, &e.plans, manifest).is_empty()
        }
        None => false,
    };
    if !valid {
        reasons.push("validity");
    }
    let floor = support_floor.max(manifest.control_bounds.support_floor_min);
    if e.support < floor as usize || e.support_floor < manifest.control_bounds.support_floor_min {
        reasons.push("support");
    }

    let known = manifest.knowledge_ids();
    let ids_ok = p.direction.knowledge_ids.iter().all(|id| known.contains(id.as_str()))
        && e.knowledge_ids == p.direction.knowledge_ids
        && e.direction_status == p.direction.status
        && (e.direction_status != DirectionStatus::SourceSupported || !e.knowledge_ids.is_empty());
    let digests_ok = [&e.manifest_digest, &e.schema_hash, &e.xi_digest, &e.grounding_digest, &e.log_digest]
        .iter()
        .all(|d| is_hex64(d))
        && e.manifest_digest == manifest.digest()
        && e.schema_hash == manifest.schema_hash;
    let origin_ok = match e.origin.kind {
        crate::search::OriginKind::Seed | crate::search::OriginKind::Injection => true,
        _ => !e.origin.parents.is_empty(),
    };
    if !(ids_ok && digests_ok && origin_ok) {
        reasons.push("provenance");
    }

    let leak_free = e.no_leak && rule.as_ref().is_some_and(|r| no_leak(r, &e.plans, &e.split_id, manifest));
    if !leak_free {
        reasons.push("no_leak");
    }

    let diags_ok = REQUIRED_DIAGNOSTICS
        .iter()
        .all(|k| e.diagnostics.get(*k).is_some_and(|v| v.is_finite()))
        && e.effect.is_finite()
        && e.coverage.is_finite();
    if !diags_ok {
        reasons.push("diagnostics");
    }
    Verdict {
        pass: reasons.is_empty(),
        reasons: reasons.into_iter().map(str::to_string).collect(),
    }
}

/// Round-level context shared by every record built in that round.
pub struct ExportContext<'a> {
    pub round: u32,
    pub manifest: &'a RunManifest,
    pub direction: &'a Direction,
    pub plan: &'a GroundingPlan,
    pub fitted: &'a [FittedPlan],
    pub support_floor: u32,
    pub xi_digest: String,
    pub grounding_digest: String,
    pub log_digest: String,
    pub diagnostic_contrast: f64,
    /// Pseudo-validation effect per frontier key.
    pub pseudo: &'a BTreeMap<String, Option<f64>>,
}

/// Longer frontier rules whose one-literal-shorter sub-rule is also on the
/// frontier with nearly the same score.
pub fn parsimony_demoted(frontier: &[Candidate]) -> BTreeSet<String> {
    let score = |c: &Candidate| {
        let e = c.eval.as_ref().expect("frontier members are scored");
        e.effect * (e.support as f64).sqrt()
    };
    let by_key: BTreeMap<&str, &Candidate> = frontier.iter().map(|c| (c.key.as_str(), c)).collect();
    frontier
        .iter()
        .filter(|c| {
            c.rule.len() > 1
                && (0..c.rule.len()).any(|i| {
                    by_key
                        .get(c.rule.without(i).canonical_key().as_str())
                        .is_some_and(|s| score(s) >= PARSIMONY_RATIO * score(c))
                })
        })
        .map(|c| c.key.clone())
        .collect()
}

pub fn build_record(ctx: &ExportContext, cand: &Candidate, demoted: bool) -> Proposition {
    let eval = cand.eval.clone().expect("exported candidates are scored");
    let m = ctx.manifest;
    let mut diagnostics = eval.diagnostics.clone();
    diagnostics.insert("effect".into(), eval.effect);
    diagnostics.insert("support".into(), eval.support as f64);
    diagnostics.insert("coverage".into(), eval.coverage);
    if let Some(r) = cand.pareto_rank {
        diagnostics.insert("pareto_rank".into(), r as f64);
    }
    diagnostics.insert("diagnostic_contrast".into(), ctx.diagnostic_contrast);

    let pv = ctx.pseudo.get(&cand.key).copied().flatten();
    let pv_status = match pv {
        None => PseudoValidationStatus::Unscorable,
        Some(x) if (x > 0.0) == (eval.effect > 0.0) && (x < 0.0) == (eval.effect < 0.0) => {
            PseudoValidationStatus::SignAgrees
        }
        Some(_) => PseudoValidationStatus::SignFlips,
    };
    let lit_keys: BTreeSet<String> = cand.rule.literals().iter().map(|l| l.key()).collect();
    let grounding = ctx
        .plan
        .grounding_map
        .iter()
        .filter(|(_, e)| e.literal_keys.iter().any(|k| lit_keys.contains(k)))
        .map(|(c, e)| (c.clone(), e.clone()))
        .collect();
    let features = cand.rule.features();
    let plans: Vec<FittedPlan> = ctx
        .fitted
        .iter()
        .filter(|p| features.contains(p.output.as_str()))
        .cloned()
        .collect();
    let no_leak = no_leak(&cand.rule, &plans, &m.split_id, m);
    let evidence = EvidenceRecord {
        round: ctx.round,
        effect: eval.effect,
        support: eval.support,
        coverage: eval.coverage,
        support_floor: ctx.support_floor,
        diagnostics,
        blocking_status: eval.blocking_status,
        pseudo_validation_effect: pv,
        pseudo_validation_status: pv_status,
        parsimony_demoted: demoted,
        validity_reasons: cand.validity.reasons.iter().map(|r| r.as_str().to_string()).collect(),
        direction_status: ctx.direction.status,
        knowledge_ids: ctx.direction.knowledge_ids.clone(),
        grounding,
        origin: cand.origin.clone(),
        generation: cand.generation,
        plans,
        split_id: m.split_id.clone(),
        manifest_digest: m.digest(),
        schema_hash: m.schema_hash.clone(),
        xi_digest: ctx.xi_digest.clone(),
        grounding_digest: ctx.grounding_digest.clone(),
        log_digest: ctx.log_digest.clone(),
        no_leak,
    };
    Proposition::new(
        ctx.direction.clone(),
        RuleRef {
            text: cand.rule.to_string(),
            semantic_key: cand.key.clone(),
        },
        evidence,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRejection {
    pub key: String,
    pub reasons: Vec<String>,
}

/// Builds records for the frontier and splits them by the predicate.
/// Passing propositions are sorted by canonical key.
pub fn export_round(ctx: &ExportContext, frontier: &[Candidate]) -> (Vec<Proposition>, Vec<ExportRejection>) {
    let keys: BTreeSet<String> = frontier.iter().map(|c| c.key.clone()).collect();
    let demoted = parsimony_demoted(frontier);
    let mut pass = Vec::new();
    let mut fail = Vec::new();
    for c in frontier {
        let p = build_record(ctx, c, demoted.contains(&c.key));
        let v = reporting_predicate(&p, &keys, ctx.support_floor, ctx.manifest);
        if v.pass {
            pass.push(p);
        } else {
            fail.push(ExportRejection {
                key: c.key.clone(),
                reasons: v.reasons,
            });
        }
    }
    pass.sort_by(|a, b| a.rule.semantic_key.cmp(&b.rule.semantic_key));
    fail.sort_by(|a, b| a.key.cmp(&b.key));
    (pass, fail)
}

/// Archive order: round ascending, then canonical key.
pub fn sort_archive(props: &mut [Proposition]) {
    props.sort_by(|a, b| {
        a.evidence
            .round
            .cmp(&b.evidence.round)
            .then_with(|| a.rule.semantic_key.cmp(&b.rule.semantic_key))
    });
}

/// Ranking of exported propositions: Pareto rank over all of them, then
/// non-demoted before demoted, then score, effect and support descending,
/// then canonical key and round ascending. Returns indices.
pub fn export_ranking(props: &[Proposition]) -> Vec<usize> {
    let pts: Vec<(f64, f64)> = props
        .iter()
        .map(|p| (p.evidence.effect, p.evidence.support as f64))
        .collect();
    let ranks = pareto_ranks(&pts);
    let mut idx: Vec<usize> = (0..props.len()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (&props[a], &props[b]);
        ranks[a]
            .cmp(&ranks[b])
            .then(pa.evidence.parsimony_demoted.cmp(&pb.evidence.parsimony_demoted))
            .then(pb.score().total_cmp(&pa.score()))
            .then(pb.evidence.effect.total_cmp(&pa.evidence.effect))
            .then(pb.evidence.support.cmp(&pa.evidence.support))
            .then_with(|| pa.rule.semantic_key.cmp(&pb.rule.semantic_key))
            .then(pa.evidence.round.cmp(&pb.evidence.round))
    });
    idx
}

pub fn write_archive(path: &Path, props: &[Proposition]) -> Result<(), ReportError> {
    std::fs::write(path, pretty_json(props)).map_err(|e| ReportError::Write(path.display().to_string(), e))
}

pub fn read_archive(path: &Path) -> Result<Vec<Proposition>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReportError::Read(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| ReportError::Parse(e.to_string()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::adapters::EffectSupport;
    use crate::controller::TargetPreference;
    use crate::manifest::fixtures::clinical_manifest;
    use crate::rule::{FeaturePlan, FitParams};
    use crate::search::OriginKind;

    pub fn direction() -> Direction {
        Direction {
            text: "metabolic".into(),
            status: DirectionStatus::SourceSupported,
            knowledge_ids: vec!["k1".into()],
            grounding_cues: vec!["metabolic".into()],
            target_preference: TargetPreference::default(),
            control_adjustment: vec![],
            rationale: "r".into(),
        }
    }

    pub fn cand(text: &str, effect: f64, support: usize) -> Candidate {
        let rule = parse_rule(text, 3).unwrap();
        Candidate {
            key: rule.canonical_key(),
            rule,
            eval: Some(EffectSupport {
                effect,
                support,
                coverage: 0.3,
                diagnostics: BTreeMap::new(),
                blocking_status: None,
            }),
            validity: Default::default(),
            origin: Origin::new(OriginKind::Seed),
            generation: 0,
            pareto_rank: Some(0),
        }
    }

    fn h() -> String {
        "ab".repeat(32)
    }

    pub fn record_for(c: &Candidate, fitted: &[FittedPlan]) -> Proposition {
        let m = clinical_manifest();
        let d = direction();
        let plan = GroundingPlan::default();
        let pseudo = BTreeMap::new();
        let ctx = ExportContext {
            round: 1,
            manifest: &m,
            direction: &d,
            plan: &plan,
            fitted,
            support_floor: 30,
            xi_digest: h(),
            grounding_digest: h(),
            log_digest: h(),
            diagnostic_contrast: 0.7,
            pseudo: &pseudo,
        };
        build_record(&ctx, c, false)
    }

    fn keys(cs: &[&Candidate]) -> BTreeSet<String> {
        cs.iter().map(|c| c.key.clone()).collect()
    }

    pub fn ratio_plan(a: &str, b: &str) -> FittedPlan {
        let plan = FeaturePlan::parse(&format!("ratio({a},{b})")).unwrap();
        FittedPlan {
            output: plan.output_name(),
            plan,
            kind: VariableKind::Numeric,
            family: "virtual".into(),
            inputs: vec![a.into(), b.into()],
            window: None,
            params: FitParams::None,
            fit_partition: "train".into(),
        }
    }

    #[test]
    fn complete_frontier_member_passes() {
        let m = clinical_manifest();
        let c = cand("bmi>27.5", 0.2, 40);
        let p = record_for(&c, &[]);
        let v = reporting_predicate(&p, &keys(&[&c]), 30, &m);
        assert!(v.pass, "{:?}", v.reasons);
        assert!(p.digest_matches());
    }

    #[test]
    fn non_frontier_member_rejected_on_frontier() {
        let m = clinical_manifest();
        let c = cand("bmi>27.5", 0.2, 40);
        let v = reporting_predicate(&record_for(&c, &[]), &BTreeSet::new(), 30, &m);
        assert_eq!(v.reasons, vec!["frontier"]);
    }

    #[test]
    fn forbidden_plan_input_fails_no_leak() {
        let m = clinical_manifest();
        let fp = ratio_plan("glucose", "outcome_score");
        let c = cand(&format!("{}>0.5", fp.output), 0.2, 40);
        let v = reporting_predicate(&record_for(&c, &[fp]), &keys(&[&c]), 30, &m);
        assert!(v.reasons.contains(&"no_leak".to_string()), "{:?}", v.reasons);

        let ok = ratio_plan("glucose", "bmi");
        let c = cand(&format!("{}>0.5", ok.output), 0.2, 40);
        let v = reporting_predicate(&record_for(&c, &[ok]), &keys(&[&c]), 30, &m);
        assert!(v.pass, "{:?}", v.reasons);
        // a derived feature without its plan cannot be checked
        let v = reporting_predicate(&record_for(&c, &[]), &keys(&[&c]), 30, &m);
        assert!(v.reasons.contains(&"no_leak".to_string()));
    }

    #[test]
    fn support_provenance_and_diagnostics() {
        let m = clinical_manifest();
        let c = cand("bmi>27.5", 0.2, 20);
        let v = reporting_predicate(&record_for(&c, &[]), &keys(&[&c]), 30, &m);
        assert_eq!(v.reasons, vec!["support"]);

        let c = cand("bmi>27.5", 0.2, 40);
        let mut p = record_for(&c, &[]);
        p.evidence.xi_digest = "short".into();
        p.evidence.diagnostics.remove("diagnostic_contrast");
        let v = reporting_predicate(&p, &keys(&[&c]), 30, &m);
        assert_eq!(v.reasons, vec!["provenance", "diagnostics"]);
        assert!(!p.digest_matches());
    }

    #[test]
    fn parsimony_and_ranking() {
        let short = cand("a>1", 0.20, 100);
        let long = cand("a>1 AND b>1", 0.25, 62);
        // 0.25*sqrt(62)=1.968; 0.2*sqrt(100)=2.0 >= 0.97*1.968
        let demoted = parsimony_demoted(&[short.clone(), long.clone()]);
        assert_eq!(demoted, BTreeSet::from([long.key.clone()]));

        let m = clinical_manifest();
        let _ = m;
        let mut props = vec![record_for(&long, &[]), record_for(&short, &[])];
        props[0].evidence.parsimony_demoted = true;
        assert_eq!(export_ranking(&props), vec![1, 0]);
        props[0].evidence.parsimony_demoted = false;
        assert_eq!(export_ranking(&props), vec![1, 0]);
        props[0].evidence.effect = 0.3;
        props[0].evidence.support = 62;
        assert_eq!(export_ranking(&props), vec![0, 1]);
    }

    #[test]
    fn archive_order_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = record_for(&cand("b>1", 0.2, 40), &[]);
        a.evidence.round = 2;
        let b = record_for(&cand("c>1", 0.2, 40), &[]);
        let mut props = vec![a, b];
        sort_archive(&mut props);
        assert_eq!(props[0].rule.text, "c>1");
        let path = dir.path().join("archive.json");
        write_archive(&path, &props).unwrap();
        let first = std::fs::read(&path).unwrap();
        assert_eq!(read_archive(&path).unwrap(), props);
        write_archive(&path, &read_archive(&path).unwrap()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        write_archive(&path, &[]).unwrap();
        assert!(read_archive(&path).unwrap().is_empty());
    }
}
