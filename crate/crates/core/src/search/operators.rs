use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Candidate, Grounding, Guidance, Origin, OriginKind, SearchError};
use crate::manifest::{OperatorKind, RunManifest};
use crate::rule::{
    validate_rule, Comparator, FeatureCatalog, FeatureOrigin, Literal, LiteralForm, Rule, ThresholdGrid,
    ValidityReport,
};

/// Single-literal space the search may draw from: every grid threshold with
/// `<=` and `>`, and every observed level as a one-level membership.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    literals: Vec<Literal>,
    by_feature: BTreeMap<String, Vec<usize>>,
}

impl Vocabulary {
    pub fn build(grid: &ThresholdGrid, catalog: &FeatureCatalog, guidance: &Guidance) -> Vocabulary {
        let prefs = &guidance.preferences;
        let admitted = |name: &str, families: Option<&[String]>| {
            let Some(f) = catalog.get(name) else { return false };
            if prefs.avoid_features.iter().any(|a| a == name) {
                return false;
            }
            match f.origin {
                FeatureOrigin::Virtual if !prefs.virtual_enabled => return false,
                FeatureOrigin::Dynamic if !prefs.dynamic_enabled => return false,
                _ => {}
            }
            families.is_none_or(|fam| fam.contains(&f.family))
        };
        let mut names: Vec<&str> = grid
            .features()
            .into_iter()
            .filter(|n| admitted(n, (!prefs.prefer_families.is_empty()).then_some(&prefs.prefer_families[..])))
            .collect();
        if names.is_empty() && !prefs.prefer_families.is_empty() {
            log::info!("preferred families leave no feature; using the full vocabulary");
            names = grid.features().into_iter().filter(|n| admitted(n, None)).collect();
        }
        let mut literals = Vec::new();
        for name in names {
            let range = prefs.ranges.get(name);
            for &t in grid.thresholds(name) {
                if range.is_some_and(|r| t < r[0] || t > r[1]) {
                    continue;
                }
                literals.push(Literal::threshold(name, Comparator::Le, t));
                literals.push(Literal::threshold(name, Comparator::Gt, t));
            }
            for level in grid.feature_levels(name) {
                literals.push(Literal::membership(name, [level.as_str()]));
            }
        }
        let mut by_feature: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, l) in literals.iter().enumerate() {
            by_feature.entry(l.feature.clone()).or_default().push(i);
        }
        Vocabulary { literals, by_feature }
    }

    pub fn len(&self) -> usize {
        self.literals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.literals.is_empty()
    }

    pub fn literals(&self) -> &[Literal] {
        &self.literals
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Literal {
        self.literals[rng.random_range(0..self.literals.len())].clone()
    }
}

/// Everything variation needs besides the population.
pub struct SearchSpace<'a> {
    pub manifest: &'a RunManifest,
    pub catalog: &'a FeatureCatalog,
    pub grid: &'a ThresholdGrid,
    pub vocabulary: Vocabulary,
    pub grounding: &'a Grounding,
}

impl<'a> SearchSpace<'a> {
    pub fn new(
        manifest: &'a RunManifest,
        catalog: &'a FeatureCatalog,
        grid: &'a ThresholdGrid,
        grounding: &'a Grounding,
        guidance: &Guidance,
    ) -> Result<SearchSpace<'a>, SearchError> {
        let vocabulary = Vocabulary::build(grid, catalog, guidance);
        if vocabulary.is_empty() {
            return Err(SearchError::EmptyVocabulary);
        }
        Ok(SearchSpace {
            manifest,
            catalog,
            grid,
            vocabulary,
            grounding,
        })
    }

    pub fn validate(&self, rule: &Rule) -> ValidityReport {
        validate_rule(rule, self.manifest, self.catalog, self.grid)
    }

    fn max_len(&self) -> usize {
        self.manifest.control_bounds.max_rule_len
    }
}

/// Plan seeds that pass validation, in plan order, followed by distinct
/// single-literal rules sampled without replacement until `n` rules or the
/// vocabulary runs out. Invalid seeds are returned separately.
pub fn seed_population(
    space: &SearchSpace,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<(Rule, Origin)>, Vec<(Rule, ValidityReport)>) {
    let mut out = Vec::new();
    let mut dropped = Vec::new();
    let mut keys = BTreeSet::new();
    for seed in &space.grounding.seeds {
        let report = space.validate(seed);
        if !report.is_valid() {
            log::info!("dropping invalid seed {seed}: {:?}", report.reasons);
            dropped.push((seed.clone(), report));
        } else if out.len() < n && keys.insert(seed.canonical_key()) {
            out.push((seed.clone(), Origin::new(OriginKind::Seed)));
        }
    }
    let vocab = space.vocabulary.literals();
    let order = sample(rng, vocab.len(), vocab.len());
    for i in order {
        if out.len() >= n {
            break;
        }
        let rule = Rule::new(vec![vocab[i].clone()]);
        if keys.insert(rule.canonical_key()) {
            out.push((rule, Origin::new(OriginKind::Seed)));
        }
    }
    (out, dropped)
}

/// Probabilities of (mutation, tuning, crossover, injection) after removing
/// operators the manifest disables.
pub fn operator_weights(guidance: &Guidance, manifest: &RunManifest) -> Result<[f64; 4], SearchError> {
    let pi = &guidance.operator_mix;
    let on = |k: OperatorKind| if manifest.operator_enabled(k) { 1.0 } else { 0.0 };
    let (mut mutate, mut tune) = (
        pi.mutation * (1.0 - guidance.tuning_subprob),
        pi.mutation * guidance.tuning_subprob,
    );
    match (manifest.operator_enabled(OperatorKind::Mutation), manifest.operator_enabled(OperatorKind::Tuning)) {
        (true, false) => (mutate, tune) = (pi.mutation, 0.0),
        (false, true) => (mutate, tune) = (0.0, pi.mutation),
        (false, false) => (mutate, tune) = (0.0, 0.0),
        (true, true) => {}
    }
    let w = [
        mutate,
        tune,
        pi.crossover * on(OperatorKind::Crossover),
        pi.injection * on(OperatorKind::Injection),
    ];
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(SearchError::NoOperators);
    }
    Ok(w.map(|x| x / total))
}

fn pick_op(weights: &[f64; 4], rng: &mut ChaCha8Rng) -> OriginKind {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let kinds = [OriginKind::Mutation, OriginKind::Tuning, OriginKind::Crossover, OriginKind::Injection];
    for (k, w) in kinds.iter().zip(weights) {
        acc += w;
        if u < acc {
            return *k;
        }
    }
    kinds.iter().zip(weights).rev().find(|(_, &w)| w > 0.0).expect("some weight is positive").0.to_owned()
}

/// Binary tournament on population order (earlier is better).
fn tournament<'c>(parents: &'c [Candidate], rng: &mut ChaCha8Rng) -> &'c Candidate {
    let a = rng.random_range(0..parents.len());
    let b = rng.random_range(0..parents.len());
    &parents[a.min(b)]
}

fn mutate(space: &SearchSpace, parent: &Rule, rng: &mut ChaCha8Rng) -> (Rule, String) {
    let can_add = parent.len() < space.max_len();
    let can_drop = parent.len() > 1;
    let choice = rng.random_range(0..3);
    if choice == 0 && can_add {
        let lit = space.vocabulary.draw(rng);
        let edit = format!("add {lit}");
        (parent.with_literal(lit), edit)
    } else if choice == 1 && can_drop {
        let i = rng.random_range(0..parent.len());
        (parent.without(i), format!("drop {}", parent.literals()[i]))
    } else {
        let i = rng.random_range(0..parent.len());
        let old = &parent.literals()[i];
        let lit = match space.vocabulary.by_feature.get(&old.feature) {
            Some(same) if rng.random_bool(0.5) => space.vocabulary.literals[same[rng.random_range(0..same.len())]].clone(),
            _ => space.vocabulary.draw(rng),
        };
        let edit = format!("modify {old} -> {lit}");
        (parent.replace(i, lit), edit)
    }
}

/// One grid step on a threshold literal, or a one-level toggle on a
/// membership literal. `None` when the rule has nothing to tune.
fn tune(space: &SearchSpace, parent: &Rule, rng: &mut ChaCha8Rng) -> Option<(Rule, String)> {
    let tunable: Vec<usize> = (0..parent.len())
        .filter(|&i| match &parent.literals()[i].form {
            LiteralForm::Threshold { .. } => true,
            LiteralForm::Membership(_) => space.grid.feature_levels(&parent.literals()[i].feature).len() > 1,
            LiteralForm::Missingness(_) => false,
        })
        .collect();
    if tunable.is_empty() {
        return None;
    }
    let i = tunable[rng.random_range(0..tunable.len())];
    let lit = &parent.literals()[i];
    match &lit.form {
        LiteralForm::Threshold { cmp, value } => {
            let dir = if rng.random_bool(0.5) { 1 } else { -1 };
            let next = space
                .grid
                .step(&lit.feature, *value, dir)
                .or_else(|| space.grid.step(&lit.feature, *value, -dir))?;
            let new = Literal::threshold(&lit.feature, *cmp, next);
            let edit = format!("tune {lit} -> {new}");
            Some((parent.replace(i, new), edit))
        }
        LiteralForm::Membership(levels) => {
            let known = space.grid.feature_levels(&lit.feature);
            let level = &known[rng.random_range(0..known.len())];
            let mut next = levels.clone();
            if !next.remove(level) {
                next.insert(level.clone());
            }
            if next.is_empty() || next.len() == known.len() {
                return None;
            }
            let new = Literal::membership(&lit.feature, next);
            let edit = format!("tune {lit} -> {new}");
            Some((parent.replace(i, new), edit))
        }
        LiteralForm::Missingness(_) => None,
    }
}

fn random_subset(rule: &Rule, rng: &mut ChaCha8Rng) -> Vec<Literal> {
    let k = rng.random_range(1..=rule.len());
    let mut idx = sample(rng, rule.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rule.literals()[i].clone()).collect()
}

/// A nonempty literal subset from each parent, merged, keeping the first
/// literal per (feature, form) and truncating to the length cap.
fn crossover(space: &SearchSpace, a: &Rule, b: &Rule, rng: &mut ChaCha8Rng) -> Rule {
    let mut lits = random_subset(a, rng);
    lits.extend(random_subset(b, rng));
    let mut seen = BTreeSet::new();
    lits.retain(|l| seen.insert((l.feature.clone(), l.form.tag())));
    if lits.len() > space.max_len() {
        let keep = sample(rng, lits.len(), space.max_len()).into_vec();
        let mut keep = keep;
        keep.sort_unstable();
        lits = keep.into_iter().map(|i| lits[i].clone()).collect();
    }
    Rule::new(lits)
}

fn inject(space: &SearchSpace, rng: &mut ChaCha8Rng) -> (Rule, String) {
    let g = space.grounding;
    let pools = [!g.seeds.is_empty(), !g.cue_literals.is_empty(), !g.hints.is_empty()];
    if pools.iter().any(|&p| p) && rng.random_bool(0.5) {
        loop {
            match rng.random_range(0..3) {
                0 if pools[0] => return (g.seeds[rng.random_range(0..g.seeds.len())].clone(), "seed".into()),
                1 if pools[1] => {
                    let lit = g.cue_literals[rng.random_range(0..g.cue_literals.len())].clone();
                    return (Rule::new(vec![lit]), "cue".into());
                }
                2 if pools[2] => return (g.hints[rng.random_range(0..g.hints.len())].clone(), "hint".into()),
                _ => {}
            }
        }
    }
    (Rule::new(vec![space.vocabulary.draw(rng)]), "random".into())
}

/// Produces `n` offspring, one operator each. Operator choice and operator
/// arguments draw from separate streams. With no parents every offspring
/// is an injection.
pub fn vary(
    space: &SearchSpace,
    parents: &[Candidate],
    weights: &[f64; 4],
    n: usize,
    choice_rng: &mut ChaCha8Rng,
    arg_rng: &mut ChaCha8Rng,
) -> Vec<(Rule, Origin)> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut kind = if parents.is_empty() {
            OriginKind::Injection
        } else {
            pick_op(weights, choice_rng)
        };
        if kind == OriginKind::Crossover && parents.len() < 2 {
            kind = OriginKind::Mutation;
        }
        let child = match kind {
            OriginKind::Injection => {
                let (rule, edit) = inject(space, arg_rng);
                (rule, Origin::with_edit(OriginKind::Injection, vec![], edit))
            }
            OriginKind::Crossover => {
                let a = tournament(parents, arg_rng);
                let b = tournament(parents, arg_rng);
                let rule = crossover(space, &a.rule, &b.rule, arg_rng);
                (rule, Origin::with_edit(OriginKind::Crossover, vec![a.key.clone(), b.key.clone()], "merge".into()))
            }
            OriginKind::Tuning => {
                let p = tournament(parents, arg_rng);
                match tune(space, &p.rule, arg_rng) {
                    Some((rule, edit)) => (rule, Origin::with_edit(OriginKind::Tuning, vec![p.key.clone()], edit)),
                    None => {
                        let (rule, edit) = mutate(space, &p.rule, arg_rng);
                        (rule, Origin::with_edit(OriginKind::Mutation, vec![p.key.clone()], edit))
                    }
                }
            }
            OriginKind::Mutation | OriginKind::Seed => {
                let p = tournament(parents, arg_rng);
                let (rule, edit) = mutate(space, &p.rule, arg_rng);
                (rule, Origin::with_edit(OriginKind::Mutation, vec![p.key.clone()], edit))
            }
        };
        out.push(child);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::fixtures::clinical_manifest;
    use crate::manifest::VariableKind;
    use crate::rule::parse_rule;
    use crate::search::Guidance;
    use rand::SeedableRng;

    fn grid(features: usize, thresholds: usize) -> ThresholdGrid {
        let mut g = ThresholdGrid::default();
        for f in 0..features {
            g.numeric
                .insert(format!("f{f:02}"), (1..=thresholds).map(|t| t as f64).collect());
        }
        g
    }

    fn manifest(features: usize) -> RunManifest {
        use crate::manifest::{schema_hash, VariableSpec};
        let mut m = clinical_manifest();
        m.schema = (0..features)
            .map(|f| VariableSpec::new(&format!("f{f:02}"), VariableKind::Numeric, "base"))
            .collect();
        m.schema_hash = schema_hash(&m.schema).unwrap();
        m
    }

    #[test]
    fn seeds_then_distinct_singletons() {
        let m = manifest(10);
        let catalog = FeatureCatalog::from_manifest(&m);
        let g = grid(10, 4);
        let grounding = Grounding {
            seeds: vec![
                parse_rule("f00>1 AND f01<=2", 3).unwrap(),
                parse_rule("f02>3", 3).unwrap(),
                parse_rule("f03>1 AND f04>2 AND f05>3", 3).unwrap(),
            ],
            ..Default::default()
        };
        let guidance = Guidance::from_defaults(&m.search);
        let space = SearchSpace::new(&m, &catalog, &g, &grounding, &guidance).unwrap();
        assert_eq!(space.vocabulary.len(), 80);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pop, dropped) = seed_population(&space, 40, &mut rng);
        assert!(dropped.is_empty());
        assert_eq!(pop.len(), 40);
        let keys: BTreeSet<String> = pop.iter().map(|p| p.0.canonical_key()).collect();
        assert_eq!(keys.len(), 40);
        assert_eq!(pop[0].0, grounding.seeds[0]);
        assert!(pop[3..].iter().all(|p| p.0.len() == 1));

        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(seed_population(&space, 40, &mut rng2).0, pop);
    }

    #[test]
    fn invalid_seed_is_dropped_and_fill_compensates() {
        let m = manifest(10);
        let catalog = FeatureCatalog::from_manifest(&m);
        let g = grid(10, 4);
        let grounding = Grounding {
            seeds: vec![parse_rule("f00>1.5", 3).unwrap(), parse_rule("treatment>0", 3).unwrap()],
            ..Default::default()
        };
        let guidance = Guidance::from_defaults(&m.search);
        let space = SearchSpace::new(&m, &catalog, &g, &grounding, &guidance).unwrap();
        let (pop, dropped) = seed_population(&space, 40, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(dropped.len(), 2);
        assert_eq!(pop.len(), 40);
    }

    #[test]
    fn empty_vocabulary() {
        let m = manifest(3);
        let catalog = FeatureCatalog::from_manifest(&m);
        let grounding = Grounding::default();
        let guidance = Guidance::from_defaults(&m.search);
        assert!(matches!(
            SearchSpace::new(&m, &catalog, &ThresholdGrid::default(), &grounding, &guidance),
            Err(SearchError::EmptyVocabulary)
        ));
    }

    #[test]
    fn tuning_moves_one_grid_step() {
        let m = manifest(1);
        let catalog = FeatureCatalog::from_manifest(&m);
        let mut g = ThresholdGrid::default();
        g.numeric.insert("f00".into(), vec![25.0, 27.5, 30.0]);
        let grounding = Grounding::default();
        let guidance = Guidance::from_defaults(&m.search);
        let space = SearchSpace::new(&m, &catalog, &g, &grounding, &guidance).unwrap();
        let parent = parse_rule("f00>27.5", 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = BTreeSet::new();
        for _ in 0..50 {
            seen.insert(tune(&space, &parent, &mut rng).unwrap().0.to_string());
        }
        assert_eq!(seen, BTreeSet::from(["f00>25".to_string(), "f00>30".to_string()]));
        let edge = parse_rule("f00>30", 3).unwrap();
        assert_eq!(tune(&space, &edge, &mut rng).unwrap().0.to_string(), "f00>27.5");
    }

    #[test]
    fn crossover_respects_length_and_duplicates() {
        let m = manifest(4);
        let catalog = FeatureCatalog::from_manifest(&m);
        let g = grid(4, 3);
        let grounding = Grounding::default();
        let guidance = Guidance::from_defaults(&m.search);
        let space = SearchSpace::new(&m, &catalog, &g, &grounding, &guidance).unwrap();
        let a = parse_rule("f00>1 AND f01>2 AND f02<=1", 3).unwrap();
        let b = parse_rule("f00<=3 AND f03>3", 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let c = crossover(&space, &a, &b, &mut rng);
            assert!(!c.is_empty() && c.len() <= 3);
            assert!(!c.has_duplicate());
            assert!(space.validate(&c).is_valid());
        }
        let c = crossover(&space, &parse_rule("f00>1 AND f01>2", 3).unwrap(), &parse_rule("f03>3", 3).unwrap(), &mut rng);
        assert!(c.features().contains("f03"));
    }

    #[test]
    fn weights_follow_mix_and_switches() {
        let mut m = manifest(1);
        let guidance = Guidance::from_defaults(&m.search);
        let w = operator_weights(&guidance, &m).unwrap();
        assert!((w[0] - 0.30).abs() < 1e-12 && (w[1] - 0.30).abs() < 1e-12);
        assert!((w[2] - 0.25).abs() < 1e-12 && (w[3] - 0.15).abs() < 1e-12);
        m.enabled_operators = vec!["crossover".into()];
        assert_eq!(operator_weights(&guidance, &m).unwrap(), [0.0, 0.0, 1.0, 0.0]);
        m.enabled_operators.clear();
        assert!(matches!(operator_weights(&guidance, &m), Err(SearchError::NoOperators)));
    }
}
