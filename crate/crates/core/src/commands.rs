//! Batch commands behind the binary: synthetic data generation, discovery
//! runs, holdout replay, knowledge cards, and offline audit.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.json          effective manifest (canonical)
//! split.json             frozen split spec
//! rounds/round_NNN_xi.json
//! rounds/round_NNN_log.jsonl
//! rounds/round_NNN.json  full round record
//! frontier.csv
//! propositions.json
//! run_metadata.json      timestamps only
//! FAILED                 present iff the run aborted
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{run_discovery, ControllerError, Discovery, Planner, RemotePlanner, ScriptedPlanner};
use crate::digest::{derive_seed, pretty_json, sha256_hex};
use crate::evidence::{
    generate_synthetic, load_table, make_split, synthetic_manifest, thaw_split, verify_split, Evidence,
    EvidenceError, EvidenceTable, SplitSpec, SyntheticConfig,
};
use crate::manifest::{AdapterConfig, ManifestError, PlannerMode, RunManifest};
use crate::par::Execution;
use crate::replay::{
    best1, check_pairing, observed_splits, ranked, replay_rule, replay_top_k, summarize, write_records_csv,
    write_skipped_csv, write_summary_csv, AggregateSummary, Cell, PairingViolation, ReplayRecord,
};
use crate::report::{
    build_cards, no_leak, read_archive, reporting_predicate, write_archive, CardConfig, CardVariant, KnowledgeCard,
    Proposition, ReportError,
};
use crate::search::ReplayConfig;

pub const FAILED_MARKER: &str = "FAILED";
pub const METADATA_FILE: &str = "run_metadata.json";

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Pairing(#[from] PairingViolation),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl CommandError {
    /// 1 for validation or pairing failures, 2 for I/O or parse failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Validation(_) | CommandError::Pairing(_) => 1,
            CommandError::Io(_) | CommandError::Parse(_) => 2,
        }
    }
}

impl From<ManifestError> for CommandError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Io { .. } => CommandError::Io(e.to_string()),
            ManifestError::Parse(_) => CommandError::Parse(e.to_string()),
            _ => CommandError::Validation(e.to_string()),
        }
    }
}

impl From<EvidenceError> for CommandError {
    fn from(e: EvidenceError) -> Self {
        match e {
            EvidenceError::Io(..) => CommandError::Io(e.to_string()),
            EvidenceError::Csv(_) | EvidenceError::Json(_) | EvidenceError::TypeMismatch(..) => {
                CommandError::Parse(e.to_string())
            }
            _ => CommandError::Validation(e.to_string()),
        }
    }
}

impl From<ReportError> for CommandError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Write(..) | ReportError::Read(..) => CommandError::Io(e.to_string()),
            ReportError::Parse(_) => CommandError::Parse(e.to_string()),
            ReportError::NoSurvivingCards => CommandError::Validation(e.to_string()),
        }
    }
}

impl From<ControllerError> for CommandError {
    fn from(e: ControllerError) -> Self {
        CommandError::Validation(e.to_string())
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> CommandError {
    CommandError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CommandError> {
    fs::write(path, contents).map_err(|e| io(path, e))
}

fn read(path: &Path) -> Result<String, CommandError> {
    fs::read_to_string(path).map_err(|e| io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CommandError {
    io(path, e)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn load_evidence_table(path: &Path, manifest: &RunManifest) -> Result<EvidenceTable, CommandError> {
    let eval = manifest.adapter.evaluation_columns();
    Ok(load_table(path, &manifest.schema, &manifest.row_key, &eval)?)
}

// ---------------------------------------------------------------- gen-synth

#[derive(Debug, Clone)]
pub struct GenSynthArgs {
    pub out: PathBuf,
    pub rows: usize,
    pub features: usize,
    pub planted_rule: String,
    pub seed: u64,
    pub scenario_id: String,
}

/// Writes `data.csv`, `manifest.json` and `synthetic_config.json`.
pub fn cmd_gen_synth(args: &GenSynthArgs) -> Result<(), CommandError> {
    fs::create_dir_all(&args.out).map_err(|e| io(&args.out, e))?;
    let cfg = SyntheticConfig::uniform_cohort(args.rows, args.features, &args.planted_rule, args.seed);
    let (table, _) = generate_synthetic(&cfg)?;
    table.write_csv(&args.out.join("data.csv"))?;
    let manifest = synthetic_manifest(&cfg, &args.scenario_id, args.seed);
    manifest.validate()?;
    write(&args.out.join("manifest.json"), manifest.canonical())?;
    write(&args.out.join("synthetic_config.json"), pretty_json(&cfg))
}

// ---------------------------------------------------------------------- run

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub manifest: PathBuf,
    pub data: PathBuf,
    /// Frozen split to reuse; created at this path when absent.
    pub split: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub rounds: Option<u32>,
    pub planner: Option<PlannerMode>,
    pub exec: Execution,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out: PathBuf,
    pub rounds: usize,
    pub exported: usize,
    pub stopped_early: bool,
    pub holdout_reads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub round: u32,
    pub rule_text: String,
    pub semantic_key: String,
    pub pareto_rank: usize,
    pub effect: f64,
    pub support: usize,
    pub coverage: f64,
    pub generation: u32,
    pub origin: String,
}

fn round_path(dir: &Path, round: u32, suffix: &str) -> PathBuf {
    dir.join("rounds").join(format!("round_{round:03}{suffix}"))
}

/// Loads the manifest, applies overrides, and rejects a manifest whose
/// final-validation boundary is open.
fn effective_manifest(args: &RunArgs) -> Result<RunManifest, CommandError> {
    let mut m = RunManifest::load(&args.manifest)?;
    if let Some(seed) = args.seed {
        m.seed = seed;
    }
    if let Some(mode) = args.planner {
        m.planner.mode = mode;
    }
    m.validate()?;
    Ok(m)
}

fn obtain_split(args: &RunArgs, m: &RunManifest, table: &EvidenceTable) -> Result<SplitSpec, CommandError> {
    match &args.split {
        Some(p) if p.exists() => Ok(thaw_split(p, table)?),
        other => {
            let s = &m.search;
            let spec = make_split(table, s.holdout_fraction, m.seed, s.group_column.as_deref(), &s.stratify_columns)?;
            if let Some(p) = other {
                spec.freeze(p)?;
            }
            Ok(spec)
        }
    }
}

fn make_planner(m: &RunManifest) -> Result<Box<dyn Planner>, CommandError> {
    Ok(match m.planner.mode {
        PlannerMode::Scripted => Box::new(ScriptedPlanner::from_manifest(m)),
        PlannerMode::Remote => Box::new(RemotePlanner::from_env(m).map_err(|e| CommandError::Validation(e.to_string()))?),
    })
}

fn frontier_rows(d: &Discovery) -> Vec<FrontierRow> {
    let mut rows = Vec::new();
    for r in &d.rounds {
        for c in &r.outcome.frontier {
            let (effect, support, coverage) = c.eval.as_ref().map(|e| (e.effect, e.support, e.coverage)).unwrap_or((f64::NAN, 0, 0.0));
            rows.push(FrontierRow {
                round: r.round,
                rule_text: c.rule.to_string(),
                semantic_key: c.key.clone(),
                pareto_rank: c.pareto_rank.unwrap_or(0),
                effect,
                support,
                coverage,
                generation: c.generation,
                origin: c.origin.kind.as_str().to_string(),
            });
        }
    }
    rows
}

fn write_run(out: &Path, m: &RunManifest, split: &SplitSpec, d: &Discovery) -> Result<(), CommandError> {
    let rounds_dir = out.join("rounds");
    fs::create_dir_all(&rounds_dir).map_err(|e| io(&rounds_dir, e))?;
    write(&out.join("manifest.json"), m.canonical())?;
    split.freeze(&out.join("split.json"))?;
    for r in &d.rounds {
        write(&round_path(out, r.round, "_xi.json"), pretty_json(&r.xi))?;
        write(&round_path(out, r.round, "_log.jsonl"), r.outcome.log.to_jsonl())?;
        write(&round_path(out, r.round, ".json"), pretty_json(r))?;
    }
    let path = out.join("frontier.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for row in frontier_rows(d) {
        w.serialize(row).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| io(&path, e))?;
    write_archive(&out.join("propositions.json"), &d.archive)?;
    Ok(())
}

/// Runs discovery end to end on the training partition and writes the
/// run directory. On failure a `FAILED` marker holding the error is left
/// beside whatever was written.
pub fn cmd_run(args: &RunArgs) -> Result<RunSummary, CommandError> {
    fs::create_dir_all(&args.out).map_err(|e| io(&args.out, e))?;
    let marker = args.out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| io(&marker, e))?;
    }
    let started = unix_now();
    let result = run_inner(args);
    match &result {
        Ok(_) => write(
            &args.out.join(METADATA_FILE),
            pretty_json(&serde_json::json!({"started_unix": started, "finished_unix": unix_now(),
                "version": env!("CARGO_PKG_VERSION")})),
        )?,
        Err(e) => {
            let _ = fs::write(&marker, format!("{e}\n"));
        }
    }
    result
}

fn run_inner(args: &RunArgs) -> Result<RunSummary, CommandError> {
    let m = effective_manifest(args)?;
    let table = load_evidence_table(&args.data, &m)?;
    let split = obtain_split(args, &m, &table)?;
    let evidence = Evidence::new(table, split)?;
    let mut planner = make_planner(&m)?;
    let rounds = args.rounds.unwrap_or(m.search.rounds);
    let d = run_discovery(&m, planner.as_mut(), evidence.train(), rounds, args.exec)?;
    write_run(&args.out, &m, evidence.split(), &d)?;
    log::info!("run wrote {} rounds, {} propositions", d.rounds.len(), d.archive.len());
    Ok(RunSummary {
        out: args.out.clone(),
        rounds: d.rounds.len(),
        exported: d.archive.len(),
        stopped_early: d.stopped_early,
        holdout_reads: evidence.holdout_reads(),
    })
}

/// Manifest, split and archive of a finished run, with every proposition
/// digest checked.
pub struct RunArtifacts {
    pub manifest: RunManifest,
    pub split: SplitSpec,
    pub archive: Vec<Proposition>,
}

pub fn load_run(dir: &Path) -> Result<RunArtifacts, CommandError> {
    if dir.join(FAILED_MARKER).exists() {
        return Err(CommandError::Validation(format!("{} is marked FAILED", dir.display())));
    }
    let manifest = RunManifest::load(&dir.join("manifest.json"))?;
    let split_path = dir.join("split.json");
    let split: SplitSpec =
        serde_json::from_str(&read(&split_path)?).map_err(|e| CommandError::Parse(format!("{}: {e}", split_path.display())))?;
    let archive = read_archive(&dir.join("propositions.json"))?;
    if let Some(p) = archive.iter().find(|p| !p.digest_matches()) {
        return Err(CommandError::Parse(format!("archive digest mismatch for `{}`", p.rule.text)));
    }
    Ok(RunArtifacts { manifest, split, archive })
}

// ------------------------------------------------------------------- replay

#[derive(Debug, Clone)]
pub struct ReplayArgs {
    pub runs: Vec<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub method: String,
    pub best1: bool,
    pub require_paired_splits: bool,
    pub top_k: Option<usize>,
    /// Extra records (other methods) merged before aggregation.
    pub extra_records: Vec<PathBuf>,
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub records: Vec<ReplayRecord>,
    pub summary: AggregateSummary,
    pub pairing: Result<(), PairingViolation>,
    pub holdout_reads: usize,
}

fn replay_run(dir: &Path, args: &ReplayArgs) -> Result<(Vec<ReplayRecord>, usize), CommandError> {
    let run = load_run(dir)?;
    let table = load_evidence_table(&args.data, &run.manifest)?;
    verify_split(&run.split, &table)?;
    let evidence = Evidence::new(table, run.split)?;
    let m = &run.manifest;
    let cell = Cell {
        method: args.method.clone(),
        task: m.scenario_id.clone(),
        split_id: m.split_id.clone(),
    };
    let order = ranked(&run.archive);
    // The ordering is fixed before the holdout is materialized.
    let chosen: Vec<&Proposition> = if args.best1 {
        best1(&run.archive).into_iter().collect()
    } else {
        order
    };
    let holdout = evidence.holdout();
    let mut records = Vec::new();
    if chosen.is_empty() {
        records.push(ReplayRecord::empty(&cell));
    } else {
        match (&m.adapter, args.best1) {
            (AdapterConfig::Connectivity(cfg), false) => {
                let k = args.top_k.unwrap_or(cfg.top_k);
                records.push(replay_top_k(&cell, &chosen, k, &holdout, m));
            }
            _ => {
                for (rank, p) in chosen.iter().enumerate() {
                    let rec = match p.parse_rule(m) {
                        Some(rule) => {
                            replay_rule(&cell, rank, &rule, &p.evidence.plans, Some(p.evidence.effect), &holdout, m)
                        }
                        None => return Err(CommandError::Parse(format!("unparsable archived rule `{}`", p.rule.text))),
                    };
                    records.push(rec);
                }
            }
        }
    }
    Ok((records, evidence.holdout_reads()))
}

/// Replays frozen rules of each run directory on its holdout partition and
/// writes records, summary and skipped manifest under `out`.
pub fn cmd_replay(args: &ReplayArgs) -> Result<ReplayOutcome, CommandError> {
    let mut records = Vec::new();
    let mut reads = 0;
    for dir in &args.runs {
        let (r, n) = replay_run(dir, args)?;
        records.extend(r);
        reads += n;
    }
    for path in &args.extra_records {
        let extra: Vec<ReplayRecord> =
            serde_json::from_str(&read(path)?).map_err(|e| CommandError::Parse(format!("{}: {e}", path.display())))?;
        records.extend(extra);
    }
    records.sort_by(|a, b| (&a.method, &a.task, &a.split_id, a.rank).cmp(&(&b.method, &b.task, &b.split_id, b.rank)));

    let pairing = check_pairing(&records, &observed_splits(&records));
    if let Err(v) = &pairing {
        if args.require_paired_splits {
            return Err(CommandError::Pairing(v.clone()));
        }
        log::warn!("{v}");
    }
    let summary = summarize(&records);
    fs::create_dir_all(&args.out).map_err(|e| io(&args.out, e))?;
    let p = args.out.join("replay_records.csv");
    write_records_csv(&p, &records).map_err(|e| csv_err(&p, e))?;
    write(&args.out.join("replay_records.json"), pretty_json(&records))?;
    let p = args.out.join("summary.csv");
    write_summary_csv(&p, &summary).map_err(|e| csv_err(&p, e))?;
    write(&args.out.join("summary.json"), pretty_json(&summary))?;
    let p = args.out.join("skipped.csv");
    write_skipped_csv(&p, &summary).map_err(|e| csv_err(&p, e))?;
    Ok(ReplayOutcome {
        records,
        summary,
        pairing,
        holdout_reads: reads,
    })
}

// ------------------------------------------------------------------- report

#[derive(Debug, Clone)]
pub struct ReportArgs {
    pub run: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub top_k: Option<usize>,
    pub min_support: Option<usize>,
}

/// Builds knowledge cards from the archive, scored on the pseudo-validation
/// slice of the training partition. The holdout is not read.
pub fn cmd_report(args: &ReportArgs) -> Result<Vec<KnowledgeCard>, CommandError> {
    let run = load_run(&args.run)?;
    let m = &run.manifest;
    let table = load_evidence_table(&args.data, m)?;
    let evidence = Evidence::new(table, run.split)?;
    let train = evidence.train();
    let s = &m.search;
    let pv = make_split(
        train,
        s.pseudo_validation_fraction,
        derive_seed(m.seed, "pseudo_validation"),
        s.group_column.as_deref(),
        &s.stratify_columns,
    )?;
    let (_, val_rows) = pv.row_indices(train)?;
    let mut validation = train.take(&val_rows);
    for p in &run.archive {
        for plan in &p.evidence.plans {
            if !validation.has_column(&plan.output) {
                if let Ok(t) = plan.extend(&validation) {
                    validation = t;
                }
            }
        }
    }
    let mut cfg = match &m.adapter {
        AdapterConfig::ClinicalTrial(c) => CardConfig::new(
            &c.bad_outcome_column,
            CardVariant::Benefit {
                treatment_column: c.treatment_column.clone(),
            },
            m.control_bounds.support_floor_min as usize,
        ),
        AdapterConfig::Connectivity(c) => match &c.label_column {
            Some(l) => CardConfig::new(l, CardVariant::Rate, m.control_bounds.support_floor_min as usize),
            None => return Err(CommandError::Validation("cards need a label column for connectivity runs".into())),
        },
    };
    if let Some(k) = args.top_k {
        cfg.top_k = k;
    }
    if let Some(n) = args.min_support {
        cfg.min_support = n;
    }
    let pool: Vec<_> = run
        .archive
        .iter()
        .filter_map(|p| p.parse_rule(m).map(|r| (r, p.digest.clone())))
        .collect();
    let cards = build_cards(&pool, &validation, &cfg, m)?;
    fs::create_dir_all(&args.out).map_err(|e| io(&args.out, e))?;
    write(&args.out.join("cards.json"), pretty_json(&cards))?;
    Ok(cards)
}

// -------------------------------------------------------------------- audit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    pub pass: bool,
    pub details: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub run: String,
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&AuditCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &str, details: Vec<String>) -> AuditCheck {
    AuditCheck {
        name: name.to_string(),
        pass: details.is_empty(),
        details,
    }
}

fn frontier_by_round(path: &Path) -> Result<BTreeMap<u32, BTreeSet<String>>, CommandError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: BTreeMap<u32, BTreeSet<String>> = BTreeMap::new();
    for row in rdr.deserialize::<FrontierRow>() {
        let row = row.map_err(|e| CommandError::Parse(format!("{}: {e}", path.display())))?;
        out.entry(row.round).or_default().insert(row.semantic_key);
    }
    Ok(out)
}

/// Re-verifies a run directory offline: archive digests, the reporting
/// predicate on every proposition, per-round log and configuration digests,
/// split lineage, and leakage. With `data`, the split is also checked
/// against the evidence file.
pub fn cmd_audit(dir: &Path, data: Option<&Path>) -> Result<AuditReport, CommandError> {
    let manifest = RunManifest::load(&dir.join("manifest.json"))?;
    let archive = read_archive(&dir.join("propositions.json"))?;
    let frontier = frontier_by_round(&dir.join("frontier.csv"))?;
    let mut checks = Vec::new();

    let bad: Vec<String> = archive
        .iter()
        .filter(|p| !p.digest_matches())
        .map(|p| format!("digest mismatch: {}", p.rule.text))
        .collect();
    checks.push(check("proposition_digests", bad));

    let mut bad = Vec::new();
    let rounds: BTreeSet<u32> = archive.iter().map(|p| p.evidence.round).chain(frontier.keys().copied()).collect();
    for r in &rounds {
        let log = fs::read(round_path(dir, *r, "_log.jsonl"));
        let xi = fs::read_to_string(round_path(dir, *r, "_xi.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<ReplayConfig>(&t).ok());
        let (Ok(log), Some(xi)) = (log, xi) else {
            bad.push(format!("round {r}: missing or unreadable log/xi"));
            continue;
        };
        let log_digest = sha256_hex(&log);
        for p in archive.iter().filter(|p| p.evidence.round == *r) {
            if p.evidence.log_digest != log_digest {
                bad.push(format!("round {r}: log digest differs for {}", p.rule.text));
            }
            if p.evidence.xi_digest != xi.digest() {
                bad.push(format!("round {r}: xi digest differs for {}", p.rule.text));
            }
        }
        if xi.manifest_digest != manifest.digest() {
            bad.push(format!("round {r}: xi manifest digest differs"));
        }
    }
    checks.push(check("round_digests", bad));

    let empty = BTreeSet::new();
    let bad: Vec<String> = archive
        .iter()
        .filter_map(|p| {
            let keys = frontier.get(&p.evidence.round).unwrap_or(&empty);
            let v = reporting_predicate(p, keys, p.evidence.support_floor, &manifest);
            (!v.pass).then(|| format!("{}: {}", p.rule.text, v.reasons.join(",")))
        })
        .collect();
    checks.push(check("reporting_predicate", bad));

    let mut bad = Vec::new();
    let split_path = dir.join("split.json");
    match read(&split_path).and_then(|t| {
        serde_json::from_str::<SplitSpec>(&t).map_err(|e| CommandError::Parse(e.to_string()))
    }) {
        Ok(spec) => {
            if let Err(e) = spec.check_disjoint() {
                bad.push(e.to_string());
            }
            if spec.split_key != manifest.row_key {
                bad.push("split key differs from the manifest row key".into());
            }
            if let Some(data) = data {
                match load_evidence_table(data, &manifest) {
                    Ok(t) => {
                        if let Err(e) = verify_split(&spec, &t) {
                            bad.push(e.to_string());
                        }
                    }
                    Err(e) => bad.push(e.to_string()),
                }
            }
        }
        Err(e) => bad.push(e.to_string()),
    }
    bad.extend(
        archive
            .iter()
            .filter(|p| p.evidence.split_id != manifest.split_id)
            .map(|p| format!("{}: split id {}", p.rule.text, p.evidence.split_id)),
    );
    checks.push(check("split_lineage", bad));

    let bad: Vec<String> = archive
        .iter()
        .filter(|p| {
            !p.evidence.no_leak
                || !p
                    .parse_rule(&manifest)
                    .is_some_and(|r| no_leak(&r, &p.evidence.plans, &p.evidence.split_id, &manifest))
        })
        .map(|p| format!("leak: {}", p.rule.text))
        .collect();
    checks.push(check("leakage", bad));

    Ok(AuditReport {
        run: dir.display().to_string(),
        checks,
    })
}
