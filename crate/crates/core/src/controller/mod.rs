//! Round-level orchestration: planner artifacts pass a fail-closed gate,
//! are grounded into search material, drive one evolutionary search on the
//! training partition, and the deterministic feedback rule sets up the next
//! round.

mod artifacts;
mod feedback;
mod planner;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use artifacts::{
    validate_artifact, Artifact, ArtifactShape, CandidateLiteral, ControlDelta, CriticReport, CueStatus, Direction,
    DirectionStatus, FeatureProposal, FrontierStatus, FrontierSummary, GroundingEntry, GroundingPlan,
    InvalidCombination, RejectedArtifact, Safety, SemanticMatch, TargetPreference, Validated, CONTROL_PARAMS,
};
pub use feedback::{
    alignment_gap, apply_deltas, clip_controls, decide_action, diagnostic_contrast, frontier_status, update_feedback,
    Branch, Diagnostics, FeedbackInputs, FeedbackPacket, FeedbackUpdate, Memory, ALIGNMENT_GAP_HIGH, GENERATION_STEP,
    INJECTION_STEP,
};
pub use planner::{
    message_content, Planner, PlannerError, PlannerExchange, PlannerResponse, PlanningContext, RemotePlanner,
    ScriptedPlanner, Transport, UreqTransport, API_KEY_VAR,
};

use crate::adapters::{AdapterError, Scorer};
use crate::digest::{derive_seed, digest_of};
use crate::evidence::{make_split, EvidenceTable};
use crate::manifest::{Action, RunManifest, Strictness, VariableKind};
use crate::par::Execution;
use crate::report::{export_round, ExportContext, ExportRejection, Proposition};
use crate::rule::{
    build_threshold_grid, materialize_plan, parse_literal, validate_rule, Comparator, FeatureCatalog, FeaturePlan,
    FittedPlan, InvalidReason, Literal, Rule, ThresholdGrid,
};
use crate::search::{evolve, CandidateStatus, Grounding, Guidance, ReplayConfig, SearchError, SearchOutcome, SearchSpace};

/// Memory entries kept per list.
pub const MEMORY_CAP: usize = 8;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("planner failed after retry: {}", .0.join("; "))]
    PlannerFailure(Vec<String>),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// State carried from one round to the next.
#[derive(Debug, Clone)]
pub struct RunState {
    pub round: u32,
    pub memory: Memory,
    pub feedback: Option<FeedbackPacket>,
    pub controls: Guidance,
    pub empty_retries_used: u32,
    pub stagnation: u32,
    pub seen_frontier: BTreeSet<String>,
    pub frontier_families: Vec<String>,
    pub frontier_summary: Vec<String>,
    pub fallback: ScriptedPlanner,
}

impl RunState {
    pub fn initial(manifest: &RunManifest) -> RunState {
        RunState {
            round: 1,
            memory: Memory::new(MEMORY_CAP),
            feedback: None,
            controls: Guidance::from_defaults(&manifest.search),
            empty_retries_used: 0,
            stagnation: 0,
            seen_frontier: BTreeSet::new(),
            frontier_families: Vec::new(),
            frontier_summary: Vec::new(),
            fallback: ScriptedPlanner::from_manifest(manifest),
        }
    }
}

/// Grounding outcome: search material plus what was dropped and why.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub grounding: Grounding,
    pub fitted: Vec<FittedPlan>,
    pub dropped: Vec<String>,
    pub leakage_flag: bool,
    pub schema_violation: bool,
}

/// Everything one round produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub planner: String,
    pub direction: Direction,
    pub plan: GroundingPlan,
    pub gate_notes: Vec<String>,
    pub rejections: Vec<RejectedArtifact>,
    pub exchanges: Vec<PlannerExchange>,
    pub grounding: GroundingReport,
    pub guidance: Guidance,
    pub clip_notes: Vec<String>,
    pub xi: ReplayConfig,
    pub outcome: SearchOutcome,
    pub pseudo_validation: BTreeMap<String, Option<f64>>,
    pub feedback: FeedbackPacket,
    pub propositions: Vec<Proposition>,
    pub export_rejections: Vec<ExportRejection>,
}

#[derive(Debug)]
pub enum RoundResult {
    Completed(Box<RoundRecord>, Box<RunState>),
    /// The planner has no further direction.
    Terminal,
}

struct Planned {
    direction: Direction,
    plan: GroundingPlan,
    notes: Vec<String>,
    exchanges: Vec<PlannerExchange>,
    source: &'static str,
}

fn gate(raw: &PlannerResponse, manifest: &RunManifest) -> Result<(Direction, GroundingPlan, Vec<String>), RejectedArtifact> {
    let s = validate_artifact(&raw.strategist, ArtifactShape::Strategist, manifest);
    let p = validate_artifact(&raw.proposer, ArtifactShape::Proposer, manifest);
    match (s, p) {
        (
            Ok(Validated {
                artifact: Artifact::Strategist(d),
                notes: mut n1,
            }),
            Ok(Validated {
                artifact: Artifact::Proposer(g),
                notes: n2,
            }),
        ) => {
            n1.extend(n2);
            Ok((d, g, n1))
        }
        (s, p) => {
            let mut reasons = Vec::new();
            let mut shape = ArtifactShape::Proposer;
            if let Err(e) = s {
                shape = ArtifactShape::Strategist;
                reasons.extend(e.reasons.iter().map(|r| format!("strategist:{r}")));
            }
            if let Err(e) = p {
                reasons.extend(e.reasons.iter().map(|r| format!("proposer:{r}")));
            }
            Err(RejectedArtifact { shape, reasons })
        }
    }
}

/// Up to two planner attempts (the second sees the rejection); then the
/// strictness policy decides between aborting and the scripted fallback.
fn plan_round(
    state: &mut RunState,
    manifest: &RunManifest,
    planner: &mut dyn Planner,
    rejections: &mut Vec<RejectedArtifact>,
) -> Result<Option<Planned>, ControllerError> {
    let mut exchanges = Vec::new();
    let attempt = |p: &mut dyn Planner, rejection: Option<&RejectedArtifact>, exchanges: &mut Vec<PlannerExchange>| {
        let ctx = PlanningContext {
            round: state.round,
            manifest,
            feedback: state.feedback.as_ref(),
            memory: &state.memory,
            frontier_families: &state.frontier_families,
            frontier_summary: &state.frontier_summary,
            rejection,
        };
        match p.plan(&ctx) {
            Err(PlannerError::ScriptExhausted) => Err(None),
            Err(e) => Err(Some(RejectedArtifact {
                shape: ArtifactShape::Strategist,
                reasons: vec![format!("planner_error:{e}")],
            })),
            Ok(resp) => {
                exchanges.extend(resp.exchanges.iter().cloned());
                gate(&resp, manifest).map_err(Some)
            }
        }
    };

    let mut last: Option<RejectedArtifact> = None;
    for _ in 0..2 {
        match attempt(planner, last.as_ref(), &mut exchanges) {
            Ok((direction, plan, notes)) => {
                return Ok(Some(Planned {
                    direction,
                    plan,
                    notes,
                    exchanges,
                    source: planner.kind(),
                }))
            }
            Err(None) => return Ok(None),
            Err(Some(r)) => {
                rejections.push(r.clone());
                last = Some(r);
            }
        }
    }
    let reasons = last.map(|r| r.reasons).unwrap_or_default();
    match manifest.planner.strictness {
        Strictness::StrictAbort => Err(ControllerError::PlannerFailure(reasons)),
        Strictness::ScriptedFallback => {
            log::warn!("planner rejected twice; using the scripted fallback: {}", reasons.join("; "));
            let mut fallback = state.fallback.clone();
            let out = attempt(&mut fallback, None, &mut exchanges);
            state.fallback = fallback;
            match out {
                Ok((direction, plan, mut notes)) => {
                    notes.push(format!("scripted fallback after: {}", reasons.join("; ")));
                    Ok(Some(Planned {
                        direction,
                        plan,
                        notes,
                        exchanges,
                        source: "scripted_fallback",
                    }))
                }
                Err(None) => Ok(None),
                Err(Some(r)) => Err(ControllerError::PlannerFailure(r.reasons)),
            }
        }
    }
}

/// Materializes proposed plans on `train` and resolves literal keys and
/// seed candidates. Unmaterializable plans and literals that fail the
/// validity check are dropped and listed.
pub fn ground(
    plan: &GroundingPlan,
    manifest: &RunManifest,
    train: &EvidenceTable,
) -> (GroundingReport, FeatureCatalog, EvidenceTable, ThresholdGrid) {
    let mut report = GroundingReport::default();
    let mut catalog = FeatureCatalog::from_manifest(manifest);
    let mut table = train.clone();
    for fp in &plan.feature_proposals {
        let fitted = FeaturePlan::parse(&fp.request).and_then(|p| materialize_plan(&p, manifest, &table, "train"));
        match fitted.and_then(|f| f.extend(&table).map(|t| (f, t))) {
            Ok((f, t)) => {
                if catalog.get(&f.output).is_none() {
                    catalog.add_fitted(&f);
                    table = t;
                    report.fitted.push(f);
                }
            }
            Err(e) => {
                if matches!(e, crate::rule::PlanError::ForbiddenInput(_)) {
                    report.leakage_flag = true;
                }
                report.dropped.push(format!("plan `{}`: {e}", fp.request));
            }
        }
    }
    let grid = build_threshold_grid(&table, &catalog, manifest.search.grid_per_feature);

    let mut check = |rule: &Rule, what: &str, report: &mut GroundingReport| -> bool {
        let v = validate_rule(rule, manifest, &catalog, &grid);
        if v.has(InvalidReason::ForbiddenField) {
            report.leakage_flag = true;
        }
        if v.has(InvalidReason::UnknownFeature) {
            report.schema_violation = true;
        }
        if !v.is_valid() {
            let rs: Vec<&str> = v.reasons.iter().map(|r| r.as_str()).collect();
            report.dropped.push(format!("{what} `{rule}`: {}", rs.join(",")));
        }
        v.is_valid()
    };

    let mut cue_literals: Vec<Literal> = Vec::new();
    let mut push_lit = |lit: Literal, report: &mut GroundingReport, check: &mut dyn FnMut(&Rule, &str, &mut GroundingReport) -> bool| {
        let key = lit.key();
        if cue_literals.iter().any(|l| l.key() == key) {
            return;
        }
        if check(&Rule::new(vec![lit.clone()]), "literal", report) {
            cue_literals.push(lit);
        }
    };
    for entry in plan.grounding_map.values() {
        for k in &entry.literal_keys {
            match parse_literal(k) {
                Ok(l) => push_lit(l, &mut report, &mut check),
                Err(e) => report.dropped.push(format!("literal `{k}`: {e}")),
            }
        }
    }
    for c in &plan.candidate_literals {
        let Some(f) = catalog.get(&c.feature) else {
            report.schema_violation = true;
            report.dropped.push(format!("candidate literal on `{}`: unknown feature", c.feature));
            continue;
        };
        match (Comparator::parse(&c.op), f.kind) {
            (Some(cmp), VariableKind::Numeric) => {
                for &v in grid.thresholds(&c.feature) {
                    push_lit(Literal::threshold(&c.feature, cmp, v), &mut report, &mut check);
                }
            }
            (None, k) if c.op == "IN" && k != VariableKind::Numeric => {
                for level in grid.feature_levels(&c.feature).to_vec() {
                    push_lit(Literal::membership(&c.feature, [level]), &mut report, &mut check);
                }
            }
            (None, _) if c.op == "MISSING" => push_lit(Literal::missing(&c.feature, true), &mut report, &mut check),
            _ => report
                .dropped
                .push(format!("candidate literal `{} {}`: operator does not fit the feature type", c.feature, c.op)),
        }
    }
    let mut seeds = Vec::new();
    for keys in &plan.seed_candidates {
        let lits: Result<Vec<Literal>, _> = keys.iter().map(|k| parse_literal(k)).collect();
        match lits {
            Ok(lits) => {
                let rule = Rule::new(lits);
                if check(&rule, "seed", &mut report) && !seeds.contains(&rule) {
                    seeds.push(rule);
                }
            }
            Err(e) => report.dropped.push(format!("seed `{}`: {e}", keys.join(" AND "))),
        }
    }
    report.grounding = Grounding {
        seeds,
        cue_literals,
        hints: Vec::new(),
    };
    (report, catalog, table, grid)
}

/// Direction preferences mapped onto the catalog: preferred entries
/// become families, avoided entries become features.
fn apply_preferences(g: &mut Guidance, d: &Direction, catalog: &FeatureCatalog) {
    let families: BTreeSet<&str> = catalog.iter().map(|f| f.family.as_str()).collect();
    let mut prefer: BTreeSet<String> = BTreeSet::new();
    for p in &d.target_preference.prefer {
        if families.contains(p.as_str()) {
            prefer.insert(p.clone());
        } else if let Some(f) = catalog.get(p) {
            prefer.insert(f.family.clone());
        }
    }
    if !prefer.is_empty() {
        g.preferences.prefer_families = prefer.into_iter().collect();
    }
    let mut avoid: BTreeSet<String> = g.preferences.avoid_features.iter().cloned().collect();
    for a in &d.target_preference.avoid {
        if families.contains(a.as_str()) {
            avoid.extend(catalog.iter().filter(|f| &f.family == a).map(|f| f.name.clone()));
        } else {
            avoid.insert(a.clone());
        }
    }
    g.preferences.avoid_features = avoid.into_iter().collect();
}

/// Effect of each frontier rule on a seeded within-train pseudo-validation
/// slice; `None` when the slice cannot score it.
fn pseudo_validation(
    outcome: &SearchOutcome,
    manifest: &RunManifest,
    train: &EvidenceTable,
) -> BTreeMap<String, Option<f64>> {
    let s = &manifest.search;
    let seed = derive_seed(manifest.seed, "pseudo_validation");
    let scorer = make_split(train, s.pseudo_validation_fraction, seed, s.group_column.as_deref(), &s.stratify_columns)
        .and_then(|split| split.row_indices(train))
        .ok()
        .map(|(_, pv)| train.take(&pv))
        .and_then(|pv| Scorer::prepare(&manifest.adapter, &pv).ok().map(|sc| (sc, pv)));
    outcome
        .frontier
        .iter()
        .map(|c| {
            let e = scorer
                .as_ref()
                .and_then(|(sc, pv)| sc.score(&c.rule, pv).ok())
                .map(|e| e.effect);
            (c.key.clone(), e)
        })
        .collect()
}

/// One round: Plan, Ground, Validate, Seed, Evolve, UpdateFeedback,
/// Report. Reads only `train`.
pub fn run_round(
    state: &RunState,
    manifest: &RunManifest,
    planner: &mut dyn Planner,
    train: &EvidenceTable,
    exec: Execution,
) -> Result<RoundResult, ControllerError> {
    let mut next = state.clone();
    let mut rejections = Vec::new();
    let Some(planned) = plan_round(&mut next, manifest, planner, &mut rejections)? else {
        return Ok(RoundResult::Terminal);
    };
    let direction = planned.direction;
    let plan = planned.plan;

    let (grounding, catalog, table, grid) = ground(&plan, manifest, train);

    let mut requested = state.controls.clone();
    apply_preferences(&mut requested, &direction, &catalog);
    let (requested, mut clip_notes) = apply_deltas(&requested, &direction.control_adjustment);
    let (guidance, notes) = clip_controls(&requested, &manifest.control_bounds);
    clip_notes.extend(notes);

    let space = SearchSpace::new(manifest, &catalog, &grid, &grounding.grounding, &guidance)?;
    let xi = ReplayConfig::freeze(manifest, &catalog, &grid, &grounding.grounding, &guidance, state.round);
    let scorer = Scorer::prepare(&manifest.adapter, &table)?;
    let outcome = evolve(&space, &table, &scorer, &xi, exec)?;

    let pseudo = pseudo_validation(&outcome, manifest, &table);
    let pairs: Vec<(f64, Option<f64>)> = outcome
        .frontier
        .iter()
        .map(|c| (c.eval.as_ref().map_or(0.0, |e| e.effect), pseudo[&c.key]))
        .collect();
    let (mut accepted, mut low) = (0usize, 0usize);
    for (_, s) in outcome.log.candidates() {
        match s {
            CandidateStatus::Accepted { .. } => accepted += 1,
            CandidateStatus::LowSupport { .. } => low += 1,
            _ => {}
        }
    }
    let mut supports: Vec<f64> = outcome
        .frontier
        .iter()
        .filter_map(|c| c.eval.as_ref().map(|e| e.support as f64))
        .collect();
    let novel = outcome.frontier.iter().any(|c| !state.seen_frontier.contains(&c.key));
    let diagnostics = Diagnostics {
        invalid_rate: outcome.log.rate("invalid"),
        low_support_rate: if accepted + low == 0 {
            0.0
        } else {
            low as f64 / (accepted + low) as f64
        },
        diversity: outcome.log.summaries().last().map_or(0.0, |s| s.diversity),
        diagnostic_contrast: diagnostic_contrast(&pairs),
        alignment_gap: alignment_gap(&plan.literal_keys(), &outcome.frontier),
        stagnation: if novel { 0 } else { state.stagnation + 1 },
        frontier_size: outcome.frontier.len(),
        median_support: feedback::median(&mut supports),
        leakage_flag: grounding.leakage_flag,
        schema_violation: grounding.schema_violation,
    };

    let families: Vec<String> = outcome
        .frontier
        .iter()
        .flat_map(|c| c.rule.features().into_iter().filter_map(|f| catalog.get(f).map(|r| r.family.clone())))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let frontier_lits: BTreeSet<String> = outcome
        .frontier
        .iter()
        .flat_map(|c| c.rule.literals().iter().map(|l| l.key()))
        .collect();
    let cue_hits: Vec<(String, bool)> = plan
        .grounding_map
        .iter()
        .map(|(cue, e)| (cue.clone(), e.literal_keys.iter().any(|k| frontier_lits.contains(k))))
        .collect();
    let defaults = Guidance::from_defaults(&manifest.search);
    let update = update_feedback(
        &diagnostics,
        &FeedbackInputs {
            direction: &direction,
            frontier_families: &families,
            cue_hits: &cue_hits,
            controls: &guidance,
            defaults: &defaults,
            policy: &manifest.controller_policy,
            bounds: &manifest.control_bounds,
            retry_available: state.empty_retries_used < manifest.controller_policy.empty_frontier_retries,
        },
        &state.memory,
    );

    let ctx = ExportContext {
        round: state.round,
        manifest,
        direction: &direction,
        plan: &plan,
        fitted: &grounding.fitted,
        support_floor: guidance.support_floor,
        xi_digest: xi.digest(),
        grounding_digest: digest_of(&plan),
        log_digest: outcome.log.digest(),
        diagnostic_contrast: diagnostics.diagnostic_contrast,
        pseudo: &pseudo,
    };
    let (propositions, export_rejections) = export_round(&ctx, &outcome.frontier);

    let action = update.packet.action;
    next.round = state.round + 1;
    next.memory = update.memory;
    next.controls = update.controls;
    next.empty_retries_used = match (action, update.packet.branch) {
        (Action::Replace, _) => 0,
        (Action::Broaden, Branch::EmptyFrontier) => state.empty_retries_used + 1,
        _ => state.empty_retries_used,
    };
    next.stagnation = diagnostics.stagnation;
    next.seen_frontier.extend(outcome.frontier.iter().map(|c| c.key.clone()));
    next.frontier_families = families;
    next.frontier_summary = outcome
        .frontier
        .iter()
        .filter_map(|c| {
            c.eval
                .as_ref()
                .map(|e| format!("{} effect={:.4} support={}", c.rule, e.effect, e.support))
        })
        .collect();
    next.feedback = Some(update.packet.clone());
    clip_notes.extend(update.clip_notes);

    let record = RoundRecord {
        round: state.round,
        planner: planned.source.to_string(),
        direction,
        plan,
        gate_notes: planned.notes,
        rejections,
        exchanges: planned.exchanges,
        grounding,
        guidance,
        clip_notes,
        xi,
        outcome,
        pseudo_validation: pseudo,
        feedback: update.packet,
        propositions,
        export_rejections,
    };
    Ok(RoundResult::Completed(Box::new(record), Box::new(next)))
}

/// All rounds of one run and the merged proposition archive.
#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub rounds: Vec<RoundRecord>,
    pub archive: Vec<Proposition>,
    pub stopped_early: bool,
}

/// Runs up to `rounds` rounds, stopping when the planner is exhausted.
pub fn run_discovery(
    manifest: &RunManifest,
    planner: &mut dyn Planner,
    train: &EvidenceTable,
    rounds: u32,
    exec: Execution,
) -> Result<Discovery, ControllerError> {
    let mut state = RunState::initial(manifest);
    let mut out = Discovery {
        rounds: Vec::new(),
        archive: Vec::new(),
        stopped_early: false,
    };
    for _ in 0..rounds {
        match run_round(&state, manifest, planner, train, exec)? {
            RoundResult::Completed(record, next) => {
                out.archive.extend(record.propositions.iter().cloned());
                out.rounds.push(*record);
                state = *next;
            }
            RoundResult::Terminal => {
                out.stopped_early = true;
                break;
            }
        }
    }
    crate::report::sort_archive(&mut out.archive);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::{generate_synthetic, synthetic_manifest, Evidence, SyntheticConfig};
    use crate::manifest::{ScriptEntry, UnknownIdPolicy};
    use serde_json::json;
    use std::time::Duration;

    fn setup() -> (RunManifest, Evidence) {
        let cfg = SyntheticConfig::uniform_cohort(1200, 6, "f01>0.5 AND f03<=0.6667", 11);
        let (table, _) = generate_synthetic(&cfg).unwrap();
        let mut m = synthetic_manifest(&cfg, "ctl", 3);
        m.search.population = 40;
        m.search.generations = 5;
        let split = make_split(&table, 0.25, 3, None, &[]).unwrap();
        (m, Evidence::new(table, split).unwrap())
    }

    #[test]
    fn two_scripted_rounds_never_touch_holdout() {
        let (m, ev) = setup();
        let mut p = ScriptedPlanner::from_manifest(&m);
        let d = run_discovery(&m, &mut p, ev.train(), 2, Execution::Auto).unwrap();
        assert_eq!(d.rounds.len(), 2);
        assert_eq!(ev.holdout_reads(), 0);
        for r in &d.rounds {
            assert!(!r.outcome.log.events().is_empty());
            let keys = r.outcome.frontier_keys();
            assert!(r.propositions.iter().all(|p| keys.contains(p.rule.semantic_key.as_str())));
        }
        let mut sorted = d.archive.clone();
        crate::report::sort_archive(&mut sorted);
        assert_eq!(sorted, d.archive);
    }

    #[test]
    fn rounds_are_deterministic() {
        let (m, ev) = setup();
        let run = |exec| {
            let mut p = ScriptedPlanner::from_manifest(&m);
            run_discovery(&m, &mut p, ev.train(), 2, exec).unwrap()
        };
        let a = run(Execution::Auto);
        let b = run(Execution::Sequential);
        assert_eq!(a.archive, b.archive);
        assert_eq!(a.rounds[1].outcome.log.digest(), b.rounds[1].outcome.log.digest());
    }

    #[test]
    fn empty_frontier_broadens_then_replaces() {
        let (mut m, ev) = setup();
        // a floor above the row count leaves nothing scorable
        m.search.support_floor = 5000;
        m.control_bounds.support_floor_min = 5000;
        let mut p = ScriptedPlanner::new(vec![m.planner.script[0].clone(); 3]);
        let d = run_discovery(&m, &mut p, ev.train(), 3, Execution::Auto).unwrap();
        let actions: Vec<Action> = d.rounds.iter().map(|r| r.feedback.action).collect();
        assert_eq!(actions, vec![Action::Broaden, Action::Replace, Action::Broaden]);
        assert!(d.rounds.iter().all(|r| r.propositions.is_empty()));
    }

    struct Garbage(std::cell::Cell<usize>);

    impl Transport for Garbage {
        fn post(&self, _: &str, _: &str, _: &str, _: Duration) -> Result<String, String> {
            self.0.set(self.0.get() + 1);
            Ok("{not json".into())
        }
    }

    #[test]
    fn strict_abort_after_one_retry() {
        let (mut m, ev) = setup();
        m.planner.remote = Some(crate::manifest::RemotePlannerConfig {
            endpoint: "https://planner.invalid".into(),
            model: "m".into(),
            temperature: 0.0,
            retries: 0,
            timeout_secs: 1,
        });
        let t = Box::new(Garbage(std::cell::Cell::new(0)));
        let mut p = RemotePlanner::new(m.planner.remote.clone().unwrap(), "k".into(), t);
        let err = run_round(&RunState::initial(&m), &m, &mut p, ev.train(), Execution::Auto).unwrap_err();
        assert!(matches!(err, ControllerError::PlannerFailure(_)));

        m.planner.strictness = Strictness::ScriptedFallback;
        let RoundResult::Completed(r, _) =
            run_round(&RunState::initial(&m), &m, &mut p, ev.train(), Execution::Auto).unwrap()
        else {
            panic!()
        };
        assert_eq!(r.planner, "scripted_fallback");
        assert_eq!(r.rejections.len(), 2);
    }

    #[test]
    fn unknown_id_downgrade_reaches_the_record() {
        let (mut m, ev) = setup();
        m.planner.unknown_id_policy = UnknownIdPolicy::Downgrade;
        let mut s = m.planner.script[0].strategist.clone();
        s["status"] = json!("source_supported");
        s["knowledge_ids"] = json!(["nope"]);
        m.planner.script = vec![ScriptEntry {
            strategist: s,
            proposer: m.planner.script[0].proposer.clone(),
        }];
        let mut p = ScriptedPlanner::from_manifest(&m);
        let RoundResult::Completed(r, _) =
            run_round(&RunState::initial(&m), &m, &mut p, ev.train(), Execution::Auto).unwrap()
        else {
            panic!()
        };
        assert_eq!(r.direction.status, DirectionStatus::ModelSuggested);
        assert!(r.gate_notes[0].starts_with("downgraded"));
    }

    #[test]
    fn grounding_drops_and_flags() {
        let (m, ev) = setup();
        let grid = build_threshold_grid(ev.train(), &FeatureCatalog::from_manifest(&m), m.search.grid_per_feature);
        let on = |f: &str, cmp: &str| format!("{f}{cmp}{}", crate::rule::render_number(grid.thresholds(f)[1]));
        let plan: GroundingPlan = serde_json::from_value(json!({
            "semantic_matches": [],
            "grounding_map": {"c": {"literal_keys": [on("f01", ">"), "f01>0.123"], "status": "matched"}},
            "candidate_literals": [{"feature": "f02", "op": ">", "value_source": "grid"}],
            "seed_candidates": [[on("f01", ">"), on("f02", "<=")]],
            "invalid_combinations": [],
            "feature_proposals": [
                {"request": "ratio(f01,f02)", "reason": "r"},
                {"request": "ratio(f01,outcome)", "reason": "r"}
            ]
        }))
        .unwrap();
        let (rep, catalog, table, grid) = ground(&plan, &m, ev.train());
        assert_eq!(rep.fitted.len(), 1);
        assert!(catalog.get("ratio__f01__f02").is_some());
        assert!(table.has_column("ratio__f01__f02"));
        assert!(rep.leakage_flag);
        assert!(rep.dropped.iter().any(|d| d.contains("f01>0.123")));
        assert_eq!(rep.grounding.seeds.len(), 1);
        assert_eq!(
            rep.grounding.cue_literals.len(),
            1 + grid.thresholds("f02").len(),
            "{:?}",
            rep.grounding.cue_literals
        );
    }
}
