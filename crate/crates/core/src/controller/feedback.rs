use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::artifacts::{ControlDelta, Direction, FrontierStatus};
use crate::manifest::{Action, ControlBounds, ControllerPolicy, OperatorMix};
use crate::search::{Candidate, Guidance};

/// Per-round statistics the feedback rule reads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub invalid_rate: f64,
    pub low_support_rate: f64,
    pub diversity: f64,
    pub diagnostic_contrast: f64,
    pub alignment_gap: f64,
    pub stagnation: u32,
    pub frontier_size: usize,
    pub median_support: f64,
    pub leakage_flag: bool,
    pub schema_violation: bool,
}

/// Which guard of the priority chain fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Integrity,
    EmptyFrontier,
    SupportOrAlignment,
    DiversityOrStagnation,
    StableSupported,
    Default,
}

/// Threshold above which the alignment gap forces broadening.
pub const ALIGNMENT_GAP_HIGH: f64 = 0.5;

/// The priority chain over round diagnostics; first matching guard wins.
pub fn decide_action(
    d: &Diagnostics,
    policy: &ControllerPolicy,
    support_floor: u32,
    retry_available: bool,
) -> (Action, Branch) {
    if d.leakage_flag || d.schema_violation || d.invalid_rate > policy.invalid_rate_ceiling {
        (Action::Replace, Branch::Integrity)
    } else if d.frontier_size == 0 {
        let a = if retry_available { Action::Broaden } else { Action::Replace };
        (a, Branch::EmptyFrontier)
    } else if d.low_support_rate > policy.low_support_rate_ceiling || d.alignment_gap > ALIGNMENT_GAP_HIGH {
        (Action::Broaden, Branch::SupportOrAlignment)
    } else if d.diversity < policy.diversity_floor || d.stagnation >= policy.upper_patience {
        (Action::Narrow, Branch::DiversityOrStagnation)
    } else if d.diagnostic_contrast >= policy.delta_high && d.median_support >= 2.0 * support_floor as f64 {
        (Action::Preserve, Branch::StableSupported)
    } else {
        (Action::Preserve, Branch::Default)
    }
}

pub fn frontier_status(d: &Diagnostics, policy: &ControllerPolicy) -> FrontierStatus {
    if d.frontier_size == 0 {
        FrontierStatus::Empty
    } else if d.low_support_rate > policy.low_support_rate_ceiling {
        FrontierStatus::LowSupport
    } else if d.diagnostic_contrast < policy.delta_low {
        FrontierStatus::Unstable
    } else {
        FrontierStatus::Coherent
    }
}

/// Fraction of frontier candidates whose pseudo-validation effect has the
/// same sign as their training effect; unscorable entries count as
/// disagreement. Zero for an empty frontier.
pub fn diagnostic_contrast(pairs: &[(f64, Option<f64>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let agree = pairs
        .iter()
        .filter(|(t, p)| p.is_some_and(|p| sign(p) == sign(*t)))
        .count();
    agree as f64 / pairs.len() as f64
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of plan literal keys that appear in no frontier rule.
pub fn alignment_gap(plan_keys: &BTreeSet<String>, frontier: &[Candidate]) -> f64 {
    if plan_keys.is_empty() {
        return 0.0;
    }
    let used: BTreeSet<String> = frontier
        .iter()
        .flat_map(|c| c.rule.literals().iter().map(|l| l.key()))
        .collect();
    plan_keys.iter().filter(|k| !used.contains(*k)).count() as f64 / plan_keys.len() as f64
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Clamps controls to the manifest bounds.
///
/// Operator probabilities are clamped entrywise and renormalized once, so
/// an entry may end slightly outside the range after renormalization. The
/// support floor never drops below `bounds.support_floor_min`. Invalid
/// inputs (non-finite values, inverted ranges) are replaced or dropped and
/// reported in the returned notes.
pub fn clip_controls(requested: &Guidance, bounds: &ControlBounds) -> (Guidance, Vec<String>) {
    let mut g = requested.clone();
    let mut notes = Vec::new();
    let [plo, phi] = bounds.population_range;
    let [glo, ghi] = bounds.generation_range;
    let [olo, ohi] = bounds.operator_prob_range;
    let clamp_u = |v: u32, lo: u32, hi: u32, name: &str, notes: &mut Vec<String>| {
        let c = v.clamp(lo, hi);
        if c != v {
            notes.push(format!("{name} {v} clipped to {c}"));
        }
        c
    };
    g.population = clamp_u(g.population, plo, phi, "population", &mut notes);
    g.generations = clamp_u(g.generations, glo, ghi, "generations", &mut notes);
    if g.support_floor < bounds.support_floor_min {
        notes.push(format!("support_floor {} raised to {}", g.support_floor, bounds.support_floor_min));
        g.support_floor = bounds.support_floor_min;
    }

    let mut pi = [g.operator_mix.mutation, g.operator_mix.crossover, g.operator_mix.injection];
    let before = pi;
    for p in pi.iter_mut() {
        *p = if p.is_finite() { p.clamp(olo, ohi) } else { olo };
    }
    let total: f64 = pi.iter().sum();
    for p in pi.iter_mut() {
        *p /= total;
    }
    if pi != before {
        notes.push(format!("operator mix {before:?} resolved to {pi:?}"));
    }
    g.operator_mix = OperatorMix {
        mutation: pi[0],
        crossover: pi[1],
        injection: pi[2],
    };

    if !g.tuning_subprob.is_finite() {
        notes.push("tuning_subprob not finite, reset to 0.5".into());
        g.tuning_subprob = 0.5;
    } else if !(0.0..=1.0).contains(&g.tuning_subprob) {
        let c = g.tuning_subprob.clamp(0.0, 1.0);
        notes.push(format!("tuning_subprob {} clipped to {c}", g.tuning_subprob));
        g.tuning_subprob = c;
    }
    g.preferences.ranges.retain(|f, [lo, hi]| {
        let ok = lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok {
            notes.push(format!("range toggle for {f} ignored"));
        }
        ok
    });
    (g, notes)
}

/// Applies planner-requested deltas before clipping; unknown parameters
/// are ignored with a note.
pub fn apply_deltas(g: &Guidance, deltas: &[ControlDelta]) -> (Guidance, Vec<String>) {
    let mut g = g.clone();
    let mut notes = Vec::new();
    let shift = |v: u32, d: f64| (v as f64 + d).round().max(0.0) as u32;
    for d in deltas {
        match d.param.as_str() {
            "population" => g.population = shift(g.population, d.delta),
            "generations" => g.generations = shift(g.generations, d.delta),
            "support_floor" => g.support_floor = shift(g.support_floor, d.delta),
            "mutation" => g.operator_mix.mutation += d.delta,
            "crossover" => g.operator_mix.crossover += d.delta,
            "injection" => g.operator_mix.injection += d.delta,
            "tuning_subprob" => g.tuning_subprob += d.delta,
            other => notes.push(format!("unknown control `{other}` ignored")),
        }
    }
    (g, notes)
}

/// Bounded summary carried between rounds. Each list keeps its most
/// recent `cap` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    pub cap: usize,
    pub retained_cues: Vec<String>,
    pub rejected_cues: Vec<String>,
    pub recent_directions: Vec<String>,
    pub stable_families: Vec<String>,
    pub failure_modes: Vec<String>,
    pub next_hint: Option<String>,
}

impl Memory {
    pub fn new(cap: usize) -> Memory {
        Memory {
            cap,
            retained_cues: Vec::new(),
            rejected_cues: Vec::new(),
            recent_directions: Vec::new(),
            stable_families: Vec::new(),
            failure_modes: Vec::new(),
            next_hint: None,
        }
    }

    pub fn largest_list(&self) -> usize {
        [
            &self.retained_cues,
            &self.rejected_cues,
            &self.recent_directions,
            &self.stable_families,
            &self.failure_modes,
        ]
        .iter()
        .map(|l| l.len())
        .max()
        .unwrap_or(0)
    }
}

fn push_bounded(list: &mut Vec<String>, items: impl IntoIterator<Item = String>, cap: usize) {
    for it in items {
        list.retain(|x| x != &it);
        list.push(it);
    }
    if list.len() > cap {
        list.drain(..list.len() - cap);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPacket {
    pub action: Action,
    pub branch: Branch,
    pub frontier_status: FrontierStatus,
    pub failure_modes: Vec<String>,
    pub stability_notes: Vec<String>,
    pub next_direction_hint: String,
    pub control_delta: Vec<ControlDelta>,
    pub diagnostics: Diagnostics,
}

/// Inputs to [`update_feedback`] beyond the diagnostics.
pub struct FeedbackInputs<'a> {
    pub direction: &'a Direction,
    pub frontier_families: &'a [String],
    pub cue_hits: &'a [(String, bool)],
    pub controls: &'a Guidance,
    pub defaults: &'a Guidance,
    pub policy: &'a ControllerPolicy,
    pub bounds: &'a ControlBounds,
    pub retry_available: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackUpdate {
    pub packet: FeedbackPacket,
    pub memory: Memory,
    pub controls: Guidance,
    pub clip_notes: Vec<String>,
}

/// Generation-budget step used when broadening.
pub const GENERATION_STEP: u32 = 5;
/// Injection-probability step used when narrowing.
pub const INJECTION_STEP: f64 = 0.05;

/// Chooses the next action, derives next-round controls, and folds the
/// round into memory.
pub fn update_feedback(d: &Diagnostics, input: &FeedbackInputs, memory: &Memory) -> FeedbackUpdate {
    let policy = input.policy;
    let (action, branch) = decide_action(d, policy, input.controls.support_floor, input.retry_available);

    let mut next = input.controls.clone();
    let hint = match action {
        Action::Replace => {
            next = input.defaults.clone();
            "replace the direction with a new hypothesis".to_string()
        }
        Action::Broaden => {
            next.generations += GENERATION_STEP;
            let floor_min = input.bounds.support_floor_min;
            if next.support_floor > floor_min {
                next.support_floor -= (next.support_floor - floor_min).div_ceil(2);
            }
            next.preferences.prefer_families.clear();
            "widen the grounding cues and feature families".to_string()
        }
        Action::Narrow => {
            next.preferences.prefer_families = input.frontier_families.to_vec();
            next.operator_mix.injection -= INJECTION_STEP;
            format!("focus on families {}", input.frontier_families.join(","))
        }
        Action::Preserve => "keep the current direction".to_string(),
    };
    let (controls, clip_notes) = clip_controls(&next, input.bounds);
    let control_delta = diff(input.controls, &controls, action);

    let mut failure_modes = Vec::new();
    let guards: [(bool, &str); 9] = [
        (d.leakage_flag, "leakage"),
        (d.schema_violation, "schema_violation"),
        (d.invalid_rate > policy.invalid_rate_ceiling, "invalid_rate"),
        (d.frontier_size == 0, "empty_frontier"),
        (d.low_support_rate > policy.low_support_rate_ceiling, "low_support"),
        (d.alignment_gap > ALIGNMENT_GAP_HIGH, "alignment_gap"),
        (d.diversity < policy.diversity_floor, "low_diversity"),
        (d.stagnation >= policy.upper_patience, "stagnation"),
        (d.frontier_size > 0 && d.diagnostic_contrast < policy.delta_low, "unstable"),
    ];
    for (hit, name) in guards {
        if hit {
            failure_modes.push(name.to_string());
        }
    }
    let stability_notes = vec![
        format!("diagnostic_contrast={:.4}", d.diagnostic_contrast),
        format!("median_support={}", d.median_support),
    ];

    let cap = memory.cap;
    let mut mem = memory.clone();
    push_bounded(
        &mut mem.retained_cues,
        input.cue_hits.iter().filter(|c| c.1).map(|c| c.0.clone()),
        cap,
    );
    push_bounded(
        &mut mem.rejected_cues,
        input.cue_hits.iter().filter(|c| !c.1).map(|c| c.0.clone()),
        cap,
    );
    push_bounded(&mut mem.recent_directions, [input.direction.text.clone()], cap);
    if action == Action::Preserve {
        push_bounded(&mut mem.stable_families, input.frontier_families.iter().cloned(), cap);
    }
    push_bounded(&mut mem.failure_modes, failure_modes.iter().cloned(), cap);
    mem.next_hint = Some(hint.clone());

    FeedbackUpdate {
        packet: FeedbackPacket {
            action,
            branch,
            frontier_status: frontier_status(d, policy),
            failure_modes,
            stability_notes,
            next_direction_hint: hint,
            control_delta,
            diagnostics: d.clone(),
        },
        memory: mem,
        controls,
        clip_notes,
    }
}

fn diff(old: &Guidance, new: &Guidance, action: Action) -> Vec<ControlDelta> {
    let reason = action.as_str().to_string();
    let pairs = [
        ("population", old.population as f64, new.population as f64),
        ("generations", old.generations as f64, new.generations as f64),
        ("support_floor", old.support_floor as f64, new.support_floor as f64),
        ("mutation", old.operator_mix.mutation, new.operator_mix.mutation),
        ("crossover", old.operator_mix.crossover, new.operator_mix.crossover),
        ("injection", old.operator_mix.injection, new.operator_mix.injection),
        ("tuning_subprob", old.tuning_subprob, new.tuning_subprob),
    ];
    pairs
        .into_iter()
        .filter(|(_, a, b)| a != b)
        .map(|(p, a, b)| ControlDelta {
            param: p.to_string(),
            delta: b - a,
            reason: reason.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::artifacts::DirectionStatus;
    use crate::manifest::SearchDefaults;
    use proptest::prelude::*;

    fn calm() -> Diagnostics {
        Diagnostics {
            invalid_rate: 0.1,
            low_support_rate: 0.1,
            diversity: 0.5,
            diagnostic_contrast: 0.5,
            alignment_gap: 0.0,
            stagnation: 0,
            frontier_size: 4,
            median_support: 40.0,
            leakage_flag: false,
            schema_violation: false,
        }
    }

    fn act(d: &Diagnostics, retry: bool) -> Action {
        decide_action(d, &ControllerPolicy::default(), 30, retry).0
    }

    #[test]
    fn documented_examples() {
        let mut d = calm();
        d.invalid_rate = 0.6;
        assert_eq!(act(&d, true), Action::Replace);
        let mut d = calm();
        d.frontier_size = 0;
        assert_eq!(act(&d, true), Action::Broaden);
        assert_eq!(act(&d, false), Action::Replace);
        let mut d = calm();
        d.diversity = 0.1;
        assert_eq!(act(&d, true), Action::Narrow);
        let mut d = calm();
        d.diagnostic_contrast = 0.8;
        d.median_support = 60.0;
        assert_eq!(decide_action(&d, &ControllerPolicy::default(), 30, true).1, Branch::StableSupported);
        d.median_support = 59.0;
        assert_eq!(decide_action(&d, &ControllerPolicy::default(), 30, true).1, Branch::Default);
    }

    #[test]
    fn pi_clip_single_pass() {
        let mut g = Guidance::from_defaults(&SearchDefaults::new(1000, 14, 10));
        g.operator_mix = OperatorMix {
            mutation: 0.9,
            crossover: 0.05,
            injection: 0.05,
        };
        let (c, notes) = clip_controls(&g, &ControlBounds::with_floor(30));
        assert!((c.operator_mix.mutation - 8.0 / 9.0).abs() < 1e-15);
        assert!((c.operator_mix.crossover - 1.0 / 18.0).abs() < 1e-15);
        assert!((c.operator_mix.injection - 1.0 / 18.0).abs() < 1e-15);
        assert_eq!(c.population, 320);
        assert_eq!(c.support_floor, 30);
        assert_eq!(notes.len(), 3);
    }

    #[test]
    fn contrast_and_gap() {
        assert_eq!(diagnostic_contrast(&[]), 0.0);
        let pairs = [(0.2, Some(0.1)), (0.2, Some(-0.1)), (-0.1, Some(-0.3)), (0.1, None)];
        assert_eq!(diagnostic_contrast(&pairs), 0.5);
        let keys: BTreeSet<String> = ["a>1".to_string(), "b>2".to_string()].into();
        assert_eq!(alignment_gap(&keys, &[]), 1.0);
        assert_eq!(alignment_gap(&BTreeSet::new(), &[]), 0.0);
    }

    fn direction() -> Direction {
        Direction {
            text: "d".into(),
            status: DirectionStatus::ModelSuggested,
            knowledge_ids: vec![],
            grounding_cues: vec![],
            target_preference: Default::default(),
            control_adjustment: vec![],
            rationale: String::new(),
        }
    }

    #[test]
    fn broaden_and_narrow_controls() {
        let defaults = Guidance::from_defaults(&SearchDefaults::new(160, 14, 30));
        let mut controls = defaults.clone();
        controls.support_floor = 50;
        controls.preferences.prefer_families = vec!["lab".into()];
        let policy = ControllerPolicy::default();
        let bounds = ControlBounds::with_floor(30);
        let fams = vec!["baseline".to_string()];
        let input = FeedbackInputs {
            direction: &direction(),
            frontier_families: &fams,
            cue_hits: &[("a".into(), true), ("b".into(), false)],
            controls: &controls,
            defaults: &defaults,
            policy: &policy,
            bounds: &bounds,
            retry_available: true,
        };
        let mut d = calm();
        d.frontier_size = 0;
        let up = update_feedback(&d, &input, &Memory::new(4));
        assert_eq!(up.packet.action, Action::Broaden);
        assert_eq!(up.controls.generations, 19);
        assert_eq!(up.controls.support_floor, 40);
        assert!(up.controls.preferences.prefer_families.is_empty());
        assert_eq!(up.packet.frontier_status, FrontierStatus::Empty);
        assert_eq!(up.memory.retained_cues, vec!["a"]);
        assert_eq!(up.memory.rejected_cues, vec!["b"]);

        let mut d = calm();
        d.diversity = 0.1;
        let up = update_feedback(&d, &input, &Memory::new(4));
        assert_eq!(up.packet.action, Action::Narrow);
        assert_eq!(up.controls.preferences.prefer_families, fams);
        assert!(up.controls.operator_mix.injection < controls.operator_mix.injection);
        assert!(up.packet.control_delta.iter().any(|c| c.param == "injection"));
    }

    fn arb_guidance() -> impl Strategy<Value = Guidance> {
        (0u32..2000, 0u32..100, 0u32..100, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, -1.0f64..2.0).prop_map(
            |(n, h, rho, a, b, c, t)| {
                let mut g = Guidance::from_defaults(&SearchDefaults::new(n, h, rho));
                g.operator_mix = OperatorMix {
                    mutation: a,
                    crossover: b,
                    injection: c,
                };
                g.tuning_subprob = t;
                g
            },
        )
    }

    proptest! {
        #[test]
        fn clip_bounds_and_idempotence(g in arb_guidance()) {
            let bounds = ControlBounds::with_floor(30);
            let (c, _) = clip_controls(&g, &bounds);
            prop_assert!((40..=320).contains(&c.population));
            prop_assert!((5..=40).contains(&c.generations));
            prop_assert!(c.support_floor >= 30);
            let pi = [c.operator_mix.mutation, c.operator_mix.crossover, c.operator_mix.injection];
            prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let (cc, _) = clip_controls(&c, &bounds);
            prop_assert_eq!(cc.population, c.population);
            prop_assert_eq!(cc.generations, c.generations);
            prop_assert_eq!(cc.support_floor, c.support_floor);
            prop_assert_eq!(cc.tuning_subprob, c.tuning_subprob);
            // a single renormalization can leave an entry outside the range;
            // once every entry is inside, the mix is a fixed point
            if pi.iter().all(|p| (0.05..=0.80).contains(p)) {
                for (x, y) in pi.iter().zip([cc.operator_mix.mutation, cc.operator_mix.crossover, cc.operator_mix.injection]) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn contrast_in_unit_interval(pairs in prop::collection::vec((-1.0f64..1.0, prop::option::of(-1.0f64..1.0)), 0..30)) {
            let c = diagnostic_contrast(&pairs);
            prop_assert!((0.0..=1.0).contains(&c));
        }

        #[test]
        fn memory_stays_bounded(cues in prop::collection::vec(("[a-f]{1,3}", any::<bool>()), 0..40), cap in 1usize..6) {
            let defaults = Guidance::from_defaults(&SearchDefaults::new(160, 14, 30));
            let policy = ControllerPolicy::default();
            let bounds = ControlBounds::with_floor(30);
            let mut mem = Memory::new(cap);
            for chunk in cues.chunks(3) {
                let input = FeedbackInputs {
                    direction: &direction(),
                    frontier_families: &[],
                    cue_hits: chunk,
                    controls: &defaults,
                    defaults: &defaults,
                    policy: &policy,
                    bounds: &bounds,
                    retry_available: false,
                };
                mem = update_feedback(&calm(), &input, &mem).memory;
                prop_assert!(mem.largest_list() <= cap);
            }
        }
    }
}
