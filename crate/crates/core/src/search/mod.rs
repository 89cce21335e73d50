//! Direction-conditioned population search over the rule grammar with a
//! retained (effect, support) Pareto frontier and an append-only log.

mod log;
mod operators;
mod pareto;
mod select;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterError, EffectSupport, Scorer};
use crate::digest::{derive_seed, digest_of};
use crate::evidence::EvidenceTable;
use crate::manifest::{OperatorMix, RunManifest, SearchDefaults};
use crate::par::Execution;
use crate::rule::{FeatureCatalog, Literal, Rule, ThresholdGrid, ValidityReport};

pub use self::log::{CandidateStatus, ExecutionLog, GenerationSummary, LogEvent};
pub use operators::{operator_weights, seed_population, vary, SearchSpace, Vocabulary};
pub use pareto::{dominates, frontier_indices, pareto_ranks};
pub use select::{diversity, select_next, selection_order};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("no admissible feature has a grid; the search vocabulary is empty")]
    EmptyVocabulary,
    #[error("every variation operator is disabled")]
    NoOperators,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Preferences {
    #[serde(default)]
    pub prefer_families: Vec<String>,
    #[serde(default)]
    pub avoid_features: Vec<String>,
    /// Inclusive threshold ranges per feature.
    #[serde(default)]
    pub ranges: BTreeMap<String, [f64; 2]>,
    #[serde(default = "yes")]
    pub dynamic_enabled: bool,
    #[serde(default = "yes")]
    pub virtual_enabled: bool,
}

fn yes() -> bool {
    true
}

/// Resolved lower-level controls for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub operator_mix: OperatorMix,
    pub tuning_subprob: f64,
    pub population: u32,
    pub generations: u32,
    pub support_floor: u32,
    pub preferences: Preferences,
}

impl Guidance {
    pub fn from_defaults(d: &SearchDefaults) -> Guidance {
        Guidance {
            operator_mix: d.operator_mix.clone(),
            tuning_subprob: d.tuning_subprob,
            population: d.population,
            generations: d.generations,
            support_floor: d.support_floor,
            preferences: Preferences {
                dynamic_enabled: true,
                virtual_enabled: true,
                ..Default::default()
            },
        }
    }
}

/// Grounded material the search starts from and injects.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub seeds: Vec<Rule>,
    pub cue_literals: Vec<Literal>,
    pub hints: Vec<Rule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginKind {
    Seed,
    Mutation,
    Crossover,
    Tuning,
    Injection,
}

impl OriginKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OriginKind::Seed => "seed",
            OriginKind::Mutation => "mutation",
            OriginKind::Crossover => "crossover",
            OriginKind::Tuning => "tuning",
            OriginKind::Injection => "injection",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub kind: OriginKind,
    pub parents: Vec<String>,
    pub edit: Option<String>,
}

impl Origin {
    pub fn new(kind: OriginKind) -> Origin {
        Origin {
            kind,
            parents: Vec::new(),
            edit: None,
        }
    }

    pub fn with_edit(kind: OriginKind, parents: Vec<String>, edit: String) -> Origin {
        Origin {
            kind,
            parents,
            edit: Some(edit),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub rule: Rule,
    pub key: String,
    pub eval: Option<EffectSupport>,
    pub validity: ValidityReport,
    pub origin: Origin,
    pub generation: u32,
    pub pareto_rank: Option<usize>,
}

impl Candidate {
    /// (effect, support); unscored candidates sort last.
    pub fn objectives(&self) -> (f64, f64) {
        match &self.eval {
            Some(e) => (e.effect, e.support as f64),
            None => (f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }
}

/// Everything that determines a search run, frozen before generation 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub master_seed: u64,
    pub round: u32,
    pub split_id: String,
    pub adapter_id: String,
    pub manifest_digest: String,
    pub grammar_hash: String,
    pub grid_hash: String,
    pub catalog_hash: String,
    pub grounding_hash: String,
    pub guidance: Guidance,
    pub archive_cap: usize,
    pub retry_cap: usize,
    pub lower_patience: u32,
}

impl ReplayConfig {
    pub fn freeze(
        manifest: &RunManifest,
        catalog: &FeatureCatalog,
        grid: &ThresholdGrid,
        grounding: &Grounding,
        guidance: &Guidance,
        round: u32,
    ) -> ReplayConfig {
        let n = guidance.population as usize;
        let grammar = (
            manifest.control_bounds.max_rule_len,
            &manifest.enabled_operators,
            ["<", "<=", ">", ">=", "IN", "MISSING"],
        );
        ReplayConfig {
            master_seed: derive_seed(manifest.seed, &format!("round{round}")),
            round,
            split_id: manifest.split_id.clone(),
            adapter_id: manifest.adapter.id().to_string(),
            manifest_digest: manifest.digest(),
            grammar_hash: digest_of(&grammar),
            grid_hash: grid.digest(),
            catalog_hash: digest_of(catalog),
            grounding_hash: digest_of(grounding),
            guidance: guidance.clone(),
            archive_cap: (5 * n).min(1000),
            retry_cap: 5 * n,
            lower_patience: manifest.controller_policy.lower_patience,
        }
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }

    fn rng(&self, label: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.master_seed, label))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Rank-0 archive members in selection order.
    pub frontier: Vec<Candidate>,
    /// Cumulative archive in selection order, ranks stamped.
    pub archive: Vec<Candidate>,
    pub log: ExecutionLog,
    pub generations_run: u32,
    pub replay_digest: String,
}

impl SearchOutcome {
    pub fn frontier_keys(&self) -> BTreeSet<&str> {
        self.frontier.iter().map(|c| c.key.as_str()).collect()
    }
}

struct Batch {
    accepted: Vec<Candidate>,
    attempts: usize,
    invalid: usize,
    duplicate: usize,
    low_support: usize,
}

/// Validates, deduplicates and scores `offspring` on the training table,
/// logging each exactly once in generation order. Scoring runs through
/// `exec`; only the scores depend on it, so results are identical.
fn process(
    offspring: Vec<(Rule, Origin)>,
    generation: u32,
    space: &SearchSpace,
    scorer: &Scorer,
    train: &EvidenceTable,
    floor: usize,
    seen: &mut BTreeSet<String>,
    exec: Execution,
    log: &mut ExecutionLog,
) -> Result<Batch, SearchError> {
    let mut batch = Batch {
        accepted: Vec::new(),
        attempts: offspring.len(),
        invalid: 0,
        duplicate: 0,
        low_support: 0,
    };
    let mut staged: Vec<(Candidate, Option<CandidateStatus>)> = Vec::with_capacity(offspring.len());
    for (rule, origin) in offspring {
        let key = rule.canonical_key();
        let validity = space.validate(&rule);
        let status = if !validity.is_valid() {
            Some(CandidateStatus::Invalid {
                reasons: validity.reasons.iter().map(|r| r.as_str().to_string()).collect(),
            })
        } else if !seen.insert(key.clone()) {
            Some(CandidateStatus::Duplicate)
        } else {
            None
        };
        staged.push((
            Candidate {
                rule,
                key,
                eval: None,
                validity,
                origin,
                generation,
                pareto_rank: None,
            },
            status,
        ));
    }
    let to_score: Vec<usize> = (0..staged.len()).filter(|&i| staged[i].1.is_none()).collect();
    let scores = exec.map(&to_score, |&i| scorer.score(&staged[i].0.rule, train));
    for (i, score) in to_score.into_iter().zip(scores) {
        staged[i].1 = Some(match score {
            Ok(es) if es.support >= floor => {
                let status = CandidateStatus::Accepted {
                    effect: es.effect,
                    support: es.support,
                    coverage: es.coverage,
                };
                staged[i].0.eval = Some(es);
                status
            }
            Ok(es) => CandidateStatus::LowSupport {
                reason: format!("support {} below floor {floor}", es.support),
            },
            Err(e) if e.is_low_support() => CandidateStatus::LowSupport { reason: e.to_string() },
            Err(AdapterError::Rule(e)) => CandidateStatus::Invalid {
                reasons: vec![e.to_string()],
            },
            Err(e) => return Err(e.into()),
        });
    }
    for (cand, status) in staged {
        let status = status.expect("every candidate has a status");
        match status {
            CandidateStatus::Invalid { .. } => batch.invalid += 1,
            CandidateStatus::Duplicate => batch.duplicate += 1,
            CandidateStatus::LowSupport { .. } => batch.low_support += 1,
            CandidateStatus::Accepted { .. } => {}
        }
        log.push(LogEvent::Candidate {
            generation,
            rule: cand.rule.to_string(),
            key: cand.key.clone(),
            origin: cand.origin.clone(),
            status: status.clone(),
        });
        if cand.eval.is_some() {
            batch.accepted.push(cand);
        }
    }
    Ok(batch)
}

fn rank0_keys(archive: &[Candidate]) -> BTreeSet<String> {
    archive
        .iter()
        .filter(|c| c.pareto_rank == Some(0))
        .map(|c| c.key.clone())
        .collect()
}

/// Runs the search for one round on the training table only.
///
/// Generation 0 scores the seeded population; each later generation varies
/// the current population into `N` scored offspring (retrying invalid and
/// duplicate ones up to the retry cap), then keeps the best `N` of parents
/// and offspring. Stops early after `lower_patience` generations without a
/// new nondominated archive point.
pub fn evolve(
    space: &SearchSpace,
    train: &EvidenceTable,
    scorer: &Scorer,
    xi: &ReplayConfig,
    exec: Execution,
) -> Result<SearchOutcome, SearchError> {
    let g = &xi.guidance;
    let n = g.population as usize;
    let floor = g.support_floor as usize;
    let weights = operator_weights(g, space.manifest)?;
    let mut seeding = xi.rng("seeding");
    let mut choice = xi.rng("operator_choice");
    let mut args = xi.rng("operator_args");
    let mut log = ExecutionLog::default();
    let mut seen = BTreeSet::new();

    let (seeds, dropped) = seed_population(space, n, &mut seeding);
    for (rule, report) in dropped {
        log.push(LogEvent::Candidate {
            generation: 0,
            key: rule.canonical_key(),
            rule: rule.to_string(),
            origin: Origin::new(OriginKind::Seed),
            status: CandidateStatus::Invalid {
                reasons: report.reasons.iter().map(|r| r.as_str().to_string()).collect(),
            },
        });
    }
    let batch = process(seeds, 0, space, scorer, train, floor, &mut seen, exec, &mut log)?;
    let mut population = select_next(batch.accepted.clone(), n);
    let mut archive = select_next(batch.accepted.clone(), xi.archive_cap);
    summarize(&mut log, 0, &batch, &population, &archive, true, false);

    let mut stagnant = 0u32;
    let mut generations_run = 0;
    for generation in 1..=g.generations {
        generations_run = generation;
        let before = rank0_keys(&archive);
        let mut offspring = Vec::new();
        let mut tally = Batch {
            accepted: Vec::new(),
            attempts: 0,
            invalid: 0,
            duplicate: 0,
            low_support: 0,
        };
        let mut produced = 0;
        while produced < n && tally.attempts < n + xi.retry_cap {
            let want = (n - produced).min(n + xi.retry_cap - tally.attempts);
            let kids = vary(space, &population, &weights, want, &mut choice, &mut args);
            let b = process(kids, generation, space, scorer, train, floor, &mut seen, exec, &mut log)?;
            produced += b.accepted.len() + b.low_support;
            tally.attempts += b.attempts;
            tally.invalid += b.invalid;
            tally.duplicate += b.duplicate;
            tally.low_support += b.low_support;
            offspring.extend(b.accepted);
        }
        let exhausted = produced < n;
        if exhausted {
            log.push(LogEvent::RetryBudgetExhausted {
                generation,
                produced,
                target: n,
            });
        }
        tally.accepted = offspring;
        let mut pool = population;
        pool.extend(tally.accepted.iter().cloned());
        population = select_next(pool, n);
        let mut pool = archive;
        pool.extend(tally.accepted.iter().cloned());
        archive = select_next(pool, xi.archive_cap);
        let after = rank0_keys(&archive);
        let fresh = !after.is_subset(&before);
        summarize(&mut log, generation, &tally, &population, &archive, fresh, exhausted);
        stagnant = if fresh { 0 } else { stagnant + 1 };
        if stagnant >= xi.lower_patience {
            log.push(LogEvent::EarlyStop {
                generation,
                stagnant_generations: stagnant,
            });
            break;
        }
    }
    let frontier = archive.iter().filter(|c| c.pareto_rank == Some(0)).cloned().collect();
    Ok(SearchOutcome {
        frontier,
        archive,
        log,
        generations_run,
        replay_digest: xi.digest(),
    })
}

fn summarize(
    log: &mut ExecutionLog,
    generation: u32,
    b: &Batch,
    population: &[Candidate],
    archive: &[Candidate],
    new_nondominated: bool,
    retry_exhausted: bool,
) {
    let rate = |k: usize, d: usize| if d == 0 { 0.0 } else { k as f64 / d as f64 };
    let scored = b.accepted.len() + b.low_support;
    log.push(LogEvent::Generation(GenerationSummary {
        generation,
        attempts: b.attempts,
        accepted: b.accepted.len(),
        invalid_rate: rate(b.invalid, b.attempts),
        low_support_rate: rate(b.low_support, scored),
        duplicate_rate: rate(b.duplicate, b.attempts),
        diversity: diversity(population),
        best_effect: archive.iter().filter_map(|c| c.eval.as_ref().map(|e| e.effect)).reduce(f64::max),
        new_nondominated,
        retry_exhausted,
    }));
}
