//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use ruleground::adapters::*;
use ruleground::commands::*;
use ruleground::controller::*;
use ruleground::evidence::*;
use ruleground::manifest::*;
use ruleground::par::Execution;
use ruleground::replay::*;
use ruleground::report::{reporting_predicate, Proposition, RuleRef};
use ruleground::rule::*;
use ruleground::search::*;

const ESTIMATOR_TOL: f64 = 1e-12;
const AUPRC_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-12;
const PARETO_BUDGET: Duration = Duration::from_secs(5);
const ESTIMATOR_BUDGET: Duration = Duration::from_secs(30);
const RECOVERY_BUDGET_PER_SEED: Duration = Duration::from_secs(60);
const RECOVERY_SEEDS: u64 = 10;
const RECOVERY_REQUIRED: usize = 8;
const RECOVERY_JACCARD: f64 = 0.8;
const RECOVERY_ARR: f64 = 0.15;
const LEAK_FUZZ_MIN: usize = 1000;
const PLANTED: &str = "f02>0.5 AND f07<=0.6667";

type Outcome = (bool, String);

// ------------------------------------------------------------------ 1

fn brute_frontier(p: &[(f64, f64)]) -> BTreeSet<usize> {
    (0..p.len())
        .filter(|&i| {
            !(0..p.len()).any(|j| {
                p[j].0 >= p[i].0 && p[j].1 >= p[i].1 && (p[j].0 > p[i].0 || p[j].1 > p[i].1)
            })
        })
        .collect()
}

fn brute_ranks(p: &[(f64, f64)]) -> Vec<usize> {
    let mut rank = vec![usize::MAX; p.len()];
    let mut left: Vec<usize> = (0..p.len()).collect();
    let mut r = 0;
    while !left.is_empty() {
        let sub: Vec<(f64, f64)> = left.iter().map(|&i| p[i]).collect();
        let front = brute_frontier(&sub);
        for &k in &front {
            rank[left[k]] = r;
        }
        left = left.iter().enumerate().filter(|(k, _)| !front.contains(k)).map(|(_, &i)| i).collect();
        r += 1;
    }
    rank
}

fn pareto_case(p: &[(f64, f64)]) -> bool {
    let got: BTreeSet<usize> = frontier_indices(p).into_iter().collect();
    got == brute_frontier(p) && pareto_ranks(p) == brute_ranks(p)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = 0;
    for case in 0..500 {
        let n = rng.random_range(0..=200);
        let p: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                if case % 2 == 0 {
                    (rng.random_range(0..6) as f64 / 5.0, rng.random_range(0..8) as f64)
                } else {
                    (rng.random_range(-1.0..1.0), rng.random_range(0.0..500.0f64).floor())
                }
            })
            .collect();
        bad += !pareto_case(&p) as usize;
    }
    let base: [(f64, f64); 12] = [
        (0.1, 10.0),
        (0.2, 10.0),
        (0.2, 10.0),
        (0.3, 5.0),
        (0.3, 8.0),
        (0.0, 20.0),
        (0.1, 20.0),
        (0.5, 1.0),
        (0.5, 0.0),
        (-0.1, 30.0),
        (0.2, 9.0),
        (0.3, 8.0),
    ];
    for mask in 0u32..(1 << 12) {
        let p: Vec<(f64, f64)> = (0..12).filter(|i| mask >> i & 1 == 1).map(|i| base[i]).collect();
        bad += !pareto_case(&p) as usize;
    }
    let el = t.elapsed();
    (
        bad == 0 && el < PARETO_BUDGET,
        format!("500 random + 4096 exhaustive subsets, {bad} mismatches, {:.2?} (< {:?})", el, PARETO_BUDGET),
    )
}

// ------------------------------------------------------------------ 2

struct RandTable {
    x: Vec<Option<f64>>,
    t: Vec<Option<f64>>,
    y: Vec<Option<f64>>,
    score: Vec<Option<f64>>,
    block: Vec<Option<String>>,
}

fn rand_table(rng: &mut ChaCha8Rng, blocks: usize) -> RandTable {
    let n = rng.random_range(1..=200);
    let maybe = |rng: &mut ChaCha8Rng, p: f64, v: f64| (!rng.random_bool(p)).then_some(v);
    let mut rt = RandTable {
        x: vec![],
        t: vec![],
        y: vec![],
        score: vec![],
        block: vec![],
    };
    for _ in 0..n {
        let x = rng.random_range(0..20) as f64 / 20.0;
        rt.x.push(maybe(rng, 0.1, x));
        let t = rng.random_range(0..2) as f64;
        rt.t.push(maybe(rng, 0.05, t));
        let y = rng.random_range(0..2) as f64;
        rt.y.push(maybe(rng, 0.05, y));
        let s = rng.random_range(-3.0..3.0);
        rt.score.push(maybe(rng, 0.05, s));
        let b = rng.random_range(0..blocks);
        rt.block.push((!rng.random_bool(0.05)).then(|| format!("b{b}")));
    }
    rt
}

fn to_table(rt: &RandTable) -> EvidenceTable {
    let n = rt.x.len();
    EvidenceTable::new(
        "row_id",
        (0..n).map(|i| format!("r{i}")).collect(),
        vec![
            ("x".into(), Column::Numeric(rt.x.clone())),
            ("treatment".into(), Column::Numeric(rt.t.clone())),
            ("bad".into(), Column::Numeric(rt.y.clone())),
            ("score".into(), Column::Numeric(rt.score.clone())),
            ("block".into(), Column::Categorical(rt.block.clone())),
        ],
    )
    .unwrap()
}

/// (effect, support, coverage) or an error label.
fn clinical_oracle(rt: &RandTable, thr: f64) -> Result<(f64, usize, f64), &'static str> {
    let n = rt.x.len();
    let (mut covered, mut n0, mut b0, mut n1, mut b1) = (0, 0, 0, 0, 0);
    for i in 0..n {
        if !rt.x[i].is_some_and(|x| x > thr) {
            continue;
        }
        covered += 1;
        if let (Some(t), Some(y)) = (rt.t[i], rt.y[i]) {
            if t == 1.0 {
                n1 += 1;
                b1 += (y == 1.0) as usize;
            } else {
                n0 += 1;
                b0 += (y == 1.0) as usize;
            }
        }
    }
    if n0 + n1 == 0 {
        return Err("empty_subgroup");
    }
    if n0 == 0 || n1 == 0 {
        return Err("empty_arm");
    }
    Ok((b0 as f64 / n0 as f64 - b1 as f64 / n1 as f64, n0.min(n1), covered as f64 / n as f64))
}

fn blocked_oracle(rt: &RandTable, thr: f64) -> Result<(f64, usize, bool), &'static str> {
    let n = rt.x.len();
    let sel = |i: usize| rt.x[i].is_some_and(|x| x > thr);
    let mut per: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let (mut all_s, mut all_c) = (vec![], vec![]);
    for i in 0..n {
        let Some(s) = rt.score[i] else { continue };
        if sel(i) {
            all_s.push(s);
        } else {
            all_c.push(s);
        }
        if let Some(b) = &rt.block[i] {
            let e = per.entry(b.as_str()).or_default();
            if sel(i) {
                e.0.push(s);
            } else {
                e.1.push(s);
            }
        }
    }
    if all_s.is_empty() {
        return Err("empty_subgroup");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let usable: Vec<&(Vec<f64>, Vec<f64>)> = per.values().filter(|(s, c)| !s.is_empty() && !c.is_empty()).collect();
    let w: usize = usable.iter().map(|(s, _)| s.len()).sum();
    if w > 0 {
        let e = usable.iter().map(|(s, c)| s.len() as f64 / w as f64 * (mean(s) - mean(c))).sum();
        return Ok((e, all_s.len(), true));
    }
    if all_c.is_empty() {
        return Err("empty_comparison");
    }
    Ok((mean(&all_s) - mean(&all_c), all_s.len(), false))
}

fn err_label(e: &AdapterError) -> &'static str {
    match e {
        AdapterError::EmptySubgroup => "empty_subgroup",
        AdapterError::EmptyArm => "empty_arm",
        AdapterError::EmptyComparison => "empty_comparison",
        _ => "other",
    }
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ccfg = ClinicalConfig {
        treatment_column: "treatment".into(),
        bad_outcome_column: "bad".into(),
    };
    let mut kcfg = ConnectivityConfig::new("score");
    kcfg.block_column = Some("block".into());
    let mut bad = Vec::new();
    let mut single_block_exact = true;
    for case in 0..1000 {
        let blocks = if case % 10 == 0 { 1 } else { rng.random_range(1..=5) };
        let rt = rand_table(&mut rng, blocks);
        let table = to_table(&rt);
        let thr = rng.random_range(0..20) as f64 / 20.0;
        let rule = parse_rule(&format!("x>{thr}"), 3).unwrap();

        let got = clinical_effect_support(&rule, &table, &ccfg);
        match (clinical_oracle(&rt, thr), &got) {
            (Ok((e, s, c)), Ok(g)) => {
                if (g.effect - e).abs() > ESTIMATOR_TOL || g.support != s || (g.coverage - c).abs() > ESTIMATOR_TOL {
                    bad.push(format!("clinical case {case}"));
                }
                let m = arr_metrics(&rule, &table, &ccfg).unwrap();
                let (n0, n1) = (m.n_control as f64, m.n_treated as f64);
                let (p0, p1) = (m.bad_rate_control, m.bad_rate_treated);
                let se = (p0 * (1.0 - p0) / n0 + p1 * (1.0 - p1) / n1).sqrt();
                let usable = (0.10..=0.60).contains(&c) && s >= 5;
                if (m.arr_bad - e).abs() > ESTIMATOR_TOL
                    || (m.parr - e * c).abs() > ESTIMATOR_TOL
                    || (m.wald_se - se).abs() > ESTIMATOR_TOL
                    || m.usable != usable
                {
                    bad.push(format!("arr case {case}"));
                }
            }
            (Err(l), Err(g)) if err_label(g) == l => {}
            _ => bad.push(format!("clinical error case {case}")),
        }

        let got = blocked_contrast(&rule, &table, &kcfg);
        match (blocked_oracle(&rt, thr), &got) {
            (Ok((e, s, blocked)), Ok(g)) => {
                let status = g.blocking_status == Some(BlockingStatus::Blocked);
                if (g.effect - e).abs() > ESTIMATOR_TOL || g.support != s || status != blocked {
                    bad.push(format!("blocked case {case}"));
                }
            }
            (Err(l), Err(g)) if err_label(g) == l => {}
            _ => bad.push(format!("blocked error case {case}")),
        }

        // one block everywhere: blocked equals unblocked, exactly
        let mut one = rt;
        one.block = vec![Some("b0".into()); one.x.len()];
        let t1 = to_table(&one);
        let mut ucfg = kcfg.clone();
        ucfg.block_column = None;
        if let (Ok(b), Ok(u)) = (blocked_contrast(&rule, &t1, &kcfg), blocked_contrast(&rule, &t1, &ucfg)) {
            single_block_exact &= b.effect == u.effect;
        }
    }
    let el = t0.elapsed();
    (
        bad.is_empty() && single_block_exact && el < ESTIMATOR_BUDGET,
        format!(
            "1000 tables, {} mismatches{}, single-block exact={single_block_exact}, {:.2?} (< {:?})",
            bad.len(),
            bad.first().map(|b| format!(" (first: {b})")).unwrap_or_default(),
            el,
            ESTIMATOR_BUDGET
        ),
    )
}

// ------------------------------------------------------------------ 3

fn criterion_3() -> Outcome {
    let p = ControllerPolicy::default();
    let floor = 30u32;
    let base = Diagnostics {
        invalid_rate: 0.1,
        low_support_rate: 0.1,
        diversity: 0.5,
        diagnostic_contrast: 0.5,
        alignment_gap: 0.1,
        stagnation: 0,
        frontier_size: 4,
        median_support: 100.0,
        leakage_flag: false,
        schema_violation: false,
    };
    use Action::*;
    use Branch::*;
    let eps = 0.01;
    type Edit = Box<dyn Fn(&mut Diagnostics)>;
    let mut table: Vec<(&str, Edit, bool, (Action, Branch))> = Vec::new();
    macro_rules! row {
        ($name:expr, $retry:expr, $want:expr, |$d:ident| $body:expr) => {
            table.push(($name, Box::new(move |$d: &mut Diagnostics| $body), $retry, $want));
        };
    }
    let (ic, lc, df, dh, up) = (p.invalid_rate_ceiling, p.low_support_rate_ceiling, p.diversity_floor, p.delta_high, p.upper_patience);
    row!("baseline", true, (Preserve, Default), |d| { let _ = d; });
    row!("invalid below", true, (Preserve, Default), |d| d.invalid_rate = ic - eps);
    row!("invalid equal", true, (Preserve, Default), |d| d.invalid_rate = ic);
    row!("invalid above", true, (Replace, Integrity), |d| d.invalid_rate = ic + eps);
    row!("leakage", true, (Replace, Integrity), |d| d.leakage_flag = true);
    row!("schema violation", true, (Replace, Integrity), |d| d.schema_violation = true);
    row!("empty frontier, retry", true, (Broaden, EmptyFrontier), |d| d.frontier_size = 0);
    row!("empty frontier, no retry", false, (Replace, EmptyFrontier), |d| d.frontier_size = 0);
    row!("frontier size 1", false, (Preserve, Default), |d| d.frontier_size = 1);
    row!("low support below", true, (Preserve, Default), |d| d.low_support_rate = lc - eps);
    row!("low support equal", true, (Preserve, Default), |d| d.low_support_rate = lc);
    row!("low support above", true, (Broaden, SupportOrAlignment), |d| d.low_support_rate = lc + eps);
    row!("gap below", true, (Preserve, Default), |d| d.alignment_gap = 0.5 - eps);
    row!("gap equal", true, (Preserve, Default), |d| d.alignment_gap = 0.5);
    row!("gap above", true, (Broaden, SupportOrAlignment), |d| d.alignment_gap = 0.5 + eps);
    row!("diversity below", true, (Narrow, DiversityOrStagnation), |d| d.diversity = df - eps);
    row!("diversity equal", true, (Preserve, Default), |d| d.diversity = df);
    row!("diversity above", true, (Preserve, Default), |d| d.diversity = df + eps);
    row!("stagnation below", true, (Preserve, Default), |d| d.stagnation = up - 1);
    row!("stagnation equal", true, (Narrow, DiversityOrStagnation), |d| d.stagnation = up);
    row!("stagnation above", true, (Narrow, DiversityOrStagnation), |d| d.stagnation = up + 1);
    row!("contrast below", true, (Preserve, Default), |d| d.diagnostic_contrast = dh - eps);
    row!("contrast equal", true, (Preserve, StableSupported), |d| d.diagnostic_contrast = dh);
    row!("contrast above", true, (Preserve, StableSupported), |d| d.diagnostic_contrast = dh + eps);
    row!("median support below", true, (Preserve, Default), |d| { d.diagnostic_contrast = dh + eps; d.median_support = 59.0; });
    row!("median support equal", true, (Preserve, StableSupported), |d| { d.diagnostic_contrast = dh + eps; d.median_support = 60.0; });
    row!("median support above", true, (Preserve, StableSupported), |d| { d.diagnostic_contrast = dh + eps; d.median_support = 61.0; });
    row!("invalid beats empty", true, (Replace, Integrity), |d| { d.invalid_rate = ic + eps; d.frontier_size = 0; });
    row!("empty beats low support", true, (Broaden, EmptyFrontier), |d| { d.frontier_size = 0; d.low_support_rate = 1.0; });
    row!("empty, no retry, beats gap", false, (Replace, EmptyFrontier), |d| { d.frontier_size = 0; d.alignment_gap = 1.0; });
    row!("low support beats diversity", true, (Broaden, SupportOrAlignment), |d| { d.low_support_rate = 1.0; d.diversity = 0.0; });
    row!("gap beats stagnation", true, (Broaden, SupportOrAlignment), |d| { d.alignment_gap = 1.0; d.stagnation = up; });
    row!("diversity beats stable", true, (Narrow, DiversityOrStagnation), |d| { d.diversity = 0.0; d.diagnostic_contrast = 1.0; });
    row!("leakage beats everything", true, (Replace, Integrity), |d| { d.leakage_flag = true; d.frontier_size = 0; d.low_support_rate = 1.0; d.diversity = 0.0; });

    let mut wrong = Vec::new();
    for (name, edit, retry, want) in &table {
        let mut d = base.clone();
        edit(&mut d);
        let got = decide_action(&d, &p, floor, *retry);
        if got != *want {
            wrong.push(format!("{name}: got {got:?}"));
        }
    }
    let n = table.len();
    (
        wrong.is_empty(),
        format!("{}/{n} rows agree{}", n - wrong.len(), if wrong.is_empty() { String::new() } else { format!("; {}", wrong.join("; ")) }),
    )
}

// ------------------------------------------------------------------ 4

fn criterion_4() -> Outcome {
    let mut hits = 0;
    let mut worst = Duration::ZERO;
    let mut lines = Vec::new();
    for seed in 0..RECOVERY_SEEDS {
        let t = Instant::now();
        let cfg = SyntheticConfig::uniform_cohort(5000, 12, PLANTED, 100 + seed);
        let (table, _) = generate_synthetic(&cfg).unwrap();
        let m = synthetic_manifest(&cfg, "planted", seed);
        assert_eq!((m.search.population, m.search.generations, m.search.support_floor), (160, 14, 30));
        let s = &m.search;
        let split = make_split(&table, s.holdout_fraction, m.seed, None, &[]).unwrap();
        let ev = Evidence::new(table, split).unwrap();
        let mut planner = ScriptedPlanner::from_manifest(&m);
        let d = run_discovery(&m, &mut planner, ev.train(), 1, Execution::Auto).unwrap();
        assert_eq!(ev.holdout_reads(), 0);
        let Ok(top) = best1(&d.archive) else {
            lines.push(format!("seed {seed}: empty export"));
            continue;
        };
        let rule = top.parse_rule(&m).unwrap();
        let hold = ev.holdout();
        let planted = parse_rule(PLANTED, 3).unwrap().mask(&hold).unwrap();
        let got = rule.mask(&hold).unwrap();
        let inter = planted.iter().zip(&got).filter(|(a, b)| **a && **b).count() as f64;
        let union = planted.iter().zip(&got).filter(|(a, b)| **a || **b).count() as f64;
        let jac = inter / union;
        let AdapterConfig::ClinicalTrial(cc) = &m.adapter else { unreachable!() };
        let arr = arr_metrics(&rule, &hold, cc).map(|a| a.arr_bad).unwrap_or(f64::NAN);
        let ok = jac >= RECOVERY_JACCARD && arr >= RECOVERY_ARR;
        hits += ok as usize;
        worst = worst.max(t.elapsed());
        lines.push(format!("seed {seed}: {} J={jac:.3} ARR={arr:.3} {}", rule, if ok { "hit" } else { "miss" }));
    }
    for l in &lines {
        println!("    {l}");
    }
    (
        hits >= RECOVERY_REQUIRED && worst < RECOVERY_BUDGET_PER_SEED,
        format!(
            "{hits}/{RECOVERY_SEEDS} seeds with Jaccard >= {RECOVERY_JACCARD} and ARR >= {RECOVERY_ARR} (need {RECOVERY_REQUIRED}); slowest seed {worst:.2?} (< {RECOVERY_BUDGET_PER_SEED:?})"
        ),
    )
}

// ------------------------------------------------------------------ 5, 7

fn gen(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("synth");
    cmd_gen_synth(&GenSynthArgs {
        out: out.clone(),
        rows: 3000,
        features: 8,
        planted_rule: "f02>0.5 AND f05<=0.6667".into(),
        seed: 58,
        scenario_id: "determinism".into(),
    })
    .unwrap();
    out
}

fn run_args(s: &Path, out: &Path, exec: Execution) -> RunArgs {
    RunArgs {
        manifest: s.join("manifest.json"),
        data: s.join("data.csv"),
        split: None,
        seed: None,
        out: out.to_path_buf(),
        rounds: Some(2),
        planner: None,
        exec,
    }
}

fn criterion_5() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let s = gen(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    cmd_run(&run_args(&s, &a, Execution::Auto)).unwrap();
    cmd_run(&run_args(&s, &b, Execution::Sequential)).unwrap();
    let mut files = vec!["frontier.csv".to_string(), "propositions.json".to_string(), "split.json".to_string()];
    for e in fs::read_dir(a.join("rounds")).unwrap() {
        files.push(format!("rounds/{}", e.unwrap().file_name().to_string_lossy()));
    }
    files.sort();
    let differ: Vec<&String> = files.iter().filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok()).collect();
    let meta_differs_only = fs::read(a.join(METADATA_FILE)).is_ok() && fs::read(b.join(METADATA_FILE)).is_ok();
    (
        differ.is_empty() && meta_differs_only,
        format!("{} artifacts compared (parallel vs sequential), {} differ; timestamps only in {METADATA_FILE}", files.len(), differ.len()),
    )
}

fn criterion_7() -> Outcome {
    // direct search and controller round
    let cfg = SyntheticConfig::uniform_cohort(1500, 6, "f01>0.5 AND f03<=0.6667", 9);
    let (table, _) = generate_synthetic(&cfg).unwrap();
    let m = synthetic_manifest(&cfg, "boundary", 9);
    let split = make_split(&table, 0.25, 9, None, &[]).unwrap();
    let ev = Evidence::new(table, split).unwrap();
    let train = ev.train();
    let catalog = FeatureCatalog::from_manifest(&m);
    let grid = build_threshold_grid(train, &catalog, 5);
    let grounding = Grounding::default();
    let mut g = Guidance::from_defaults(&m.search);
    g.population = 40;
    g.generations = 4;
    let space = SearchSpace::new(&m, &catalog, &grid, &grounding, &g).unwrap();
    let xi = ReplayConfig::freeze(&m, &catalog, &grid, &grounding, &g, 1);
    let scorer = Scorer::prepare(&m.adapter, train).unwrap();
    evolve(&space, train, &scorer, &xi, Execution::Auto).unwrap();
    let after_evolve = ev.holdout_reads();
    let mut planner = ScriptedPlanner::from_manifest(&m);
    let state = RunState::initial(&m);
    run_round(&state, &m, &mut planner, train, Execution::Auto).unwrap();
    let after_round = ev.holdout_reads();

    let tmp = tempfile::tempdir().unwrap();
    let s = gen(tmp.path());
    let run = tmp.path().join("run");
    let summary = cmd_run(&run_args(&s, &run, Execution::Auto)).unwrap();
    let replay = cmd_replay(&ReplayArgs {
        runs: vec![run],
        data: s.join("data.csv"),
        out: tmp.path().join("replay"),
        method: "ruleground".into(),
        best1: true,
        require_paired_splits: true,
        top_k: None,
        extra_records: vec![],
    })
    .unwrap();
    (
        after_evolve == 0 && after_round == 0 && summary.holdout_reads == 0 && replay.holdout_reads >= 1,
        format!(
            "holdout reads: evolve {after_evolve}, run_round {after_round}, cmd_run {}, cmd_replay {}",
            summary.holdout_reads, replay.holdout_reads
        ),
    )
}

// ------------------------------------------------------------------ 6

fn criterion_6() -> Outcome {
    let cfg = SyntheticConfig::uniform_cohort(2000, 6, "f01>0.5 AND f03<=0.6667", 21);
    let (table, _) = generate_synthetic(&cfg).unwrap();
    let mut m = synthetic_manifest(&cfg, "leak", 21);
    m.search.population = 60;
    m.search.generations = 6;
    let split = make_split(&table, 0.25, 21, None, &[]).unwrap();
    let ev = Evidence::new(table, split).unwrap();
    let train = ev.train();
    let mut planner = ScriptedPlanner::from_manifest(&m);
    let d = run_discovery(&m, &mut planner, train, 1, Execution::Auto).unwrap();
    let props: Vec<&Proposition> = d.archive.iter().take(8).collect();
    assert!(!props.is_empty());
    let catalog = FeatureCatalog::from_manifest(&m);
    let grid = build_threshold_grid(train, &catalog, 5);

    let forbidden = ["treatment", "bad_outcome", "row_id", "Treatment_arm", "post_outcome_score", "outcome", "prior_treatment", "BAD_OUTCOME"];
    let mut tried = 0usize;
    let mut passed = 0usize;
    let mut plan_id = 0usize;
    'outer: for round in 0.. {
        for p in &props {
            for f in forbidden {
                for mode in 0..5 {
                    let (lit_feature, plans) = match mode {
                        0 => (f.to_string(), vec![]),
                        1 | 2 | 3 | 4 => {
                            let (op, text) = match mode {
                                1 => ("ratio", format!("ratio({f},f01)")),
                                2 => ("difference", format!("difference(f02,{f})")),
                                3 => ("window_mean", format!("window_mean({f};w1)")),
                                _ => ("last_minus_first", format!("last_minus_first({f},f00;w2)")),
                            };
                            let plan = FeaturePlan::parse(&text).unwrap();
                            plan_id += 1;
                            // neutral output name so only the inputs carry the leak
                            let output = if plan_id % 2 == 0 { format!("v{plan_id}_{op}") } else { plan.output_name() };
                            let window = plan.arg.clone().filter(|_| plan.op.is_dynamic());
                            let fitted = FittedPlan {
                                inputs: plan.inputs.clone(),
                                output: output.clone(),
                                plan,
                                kind: VariableKind::Numeric,
                                family: "virtual".into(),
                                window,
                                params: FitParams::None,
                                fit_partition: "train".into(),
                            };
                            (output, vec![fitted])
                        }
                        _ => unreachable!(),
                    };
                    let thr = [0.25, 0.5, 0.75][round % 3];
                    let op = if round % 2 == 0 { ">" } else { "<=" };
                    let text = format!("{} AND {lit_feature}{op}{thr}", p.rule.text);
                    let Ok(rule) = parse_rule(&text, 4) else { continue };
                    tried += 1;

                    let mut cat = catalog.clone();
                    for pl in &plans {
                        cat.add_fitted(pl);
                    }
                    let valid = validate_rule(&rule, &m, &cat, &grid).is_valid();

                    let mut ev_rec = p.evidence.clone();
                    ev_rec.plans.extend(plans);
                    let key = rule.canonical_key();
                    let mutated = Proposition::new(
                        p.direction.clone(),
                        RuleRef {
                            text: rule.to_string(),
                            semantic_key: key.clone(),
                        },
                        ev_rec,
                    );
                    let mut m4 = m.clone();
                    m4.control_bounds.max_rule_len = 4;
                    let frontier = BTreeSet::from([key]);
                    let verdict = reporting_predicate(&mutated, &frontier, p.evidence.support_floor, &m4);
                    passed += (valid || verdict.pass) as usize;
                    if tried >= LEAK_FUZZ_MIN {
                        break 'outer;
                    }
                }
            }
        }
    }

    // permuting evaluation-only columns leaves covered sets unchanged
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut changed = 0;
    let names: Vec<String> = train.column_names().to_vec();
    for _ in 0..20 {
        let mut rows: Vec<usize> = (0..train.n_rows()).collect();
        for i in (1..rows.len()).rev() {
            rows.swap(i, rng.random_range(0..=i));
        }
        let cols: Vec<(String, Column)> = names
            .iter()
            .map(|n| {
                let c = train.column(n).unwrap();
                let c = if m.is_evaluation_column(n) { c.take(&rows) } else { c.clone() };
                (n.clone(), c)
            })
            .collect();
        let shuffled = EvidenceTable::new(train.row_key(), train.keys().to_vec(), cols).unwrap();
        for p in &d.archive {
            let r = p.parse_rule(&m).unwrap();
            changed += (r.mask(train).unwrap() != r.mask(&shuffled).unwrap()) as usize;
        }
    }
    (
        tried >= LEAK_FUZZ_MIN && passed == 0 && changed == 0,
        format!(
            "{passed}/{tried} mutated candidates passed a gate; {changed} covered-set changes over 20 evaluation-column permutations x {} rules",
            d.archive.len()
        ),
    )
}

// ------------------------------------------------------------------ 8

fn criterion_8() -> Outcome {
    let g = gap(0.20, 0.15);
    let cells = [
        (0.05, 4, false),
        (0.05, 5, false),
        (0.10, 4, false),
        (0.10, 5, true),
        (0.60, 4, false),
        (0.60, 5, true),
        (0.70, 4, false),
        (0.70, 5, false),
    ];
    let truth = cells.iter().all(|&(c, k, want)| usable_support(c, k) == want);
    let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
    let s = seed_schedule(58, 10, 50, None);
    let ok = (g - 0.25).abs() < METRIC_TOL
        && truth
        && (ap - 5.0 / 6.0).abs() < AUPRC_TOL
        && s.len() == 50
        && s[0] == 58
        && s[49] == 548;
    (
        ok,
        format!("gap={g:.12}, usable truth table {}, AP={ap:.10}, schedule endpoints {{{}, {}}}", if truth { "ok" } else { "WRONG" }, s[0], s[49]),
    )
}

// ------------------------------------------------------------------ 9

fn gate_manifest() -> RunManifest {
    let cfg = SyntheticConfig::uniform_cohort(100, 6, "f01>0.5", 1);
    let mut m = synthetic_manifest(&cfg, "gate", 1);
    m.knowledge_records.push(KnowledgeRecord {
        id: "k1".into(),
        statement: "baseline covariates modify response".into(),
        source_descriptor: "synthetic design note".into(),
        scope: "synthetic cohort".into(),
        transform: "manual".into(),
    });
    m
}

fn clean_strategist() -> Value {
    json!({
        "direction": "baseline covariate subgroup",
        "status": "source_supported",
        "knowledge_ids": ["k1"],
        "grounding_cues": ["baseline"],
        "target_preference": {"prefer": ["baseline"], "avoid": []},
        "control_adjustment": [{"param": "population", "delta": 10, "reason": "wider search"}],
        "rationale": "design note points at baseline covariates"
    })
}

fn clean_proposer() -> Value {
    json!({
        "semantic_matches": [{"cue": "baseline", "features": ["f01", "f02"], "windows": []}],
        "grounding_map": {"baseline": {"literal_keys": ["f01>0.5"], "status": "matched"}},
        "candidate_literals": [{"feature": "f01", "op": ">", "value_source": "grid"}],
        "seed_candidates": [["f01>0.5"]],
        "invalid_combinations": [],
        "feature_proposals": [],
        "safety": {"uses_forbidden_field": false}
    })
}

fn mutations(clean: &Value, shape: ArtifactShape) -> Vec<(String, Value)> {
    let obj = clean.as_object().unwrap();
    let mut out = Vec::new();
    for k in obj.keys() {
        let mut v = clean.clone();
        v.as_object_mut().unwrap().remove(k);
        out.push((format!("remove {k}"), v));
        let mut v = clean.clone();
        let x = v.as_object_mut().unwrap().remove(k).unwrap();
        v[format!("{k}_renamed")] = x;
        out.push((format!("rename {k}"), v));
    }
    for extra in ["notes", "confidence", "extra"] {
        let mut v = clean.clone();
        v[extra] = json!("x");
        out.push((format!("add {extra}"), v));
    }
    for claim in ["p_value", "validation_effect", "test_auc", "significance"] {
        let mut v = clean.clone();
        v[claim] = json!(0.01);
        out.push((format!("top-level claim {claim}"), v));
    }
    for bad in ["NaN", "nan", "Infinity", "-inf"] {
        let mut v = clean.clone();
        match shape {
            ArtifactShape::Strategist => v["control_adjustment"][0]["delta"] = json!(bad),
            _ => v["seed_candidates"][0][0] = json!(format!("f01>{bad}")),
        }
        out.push((format!("non-finite {bad}"), v));
    }
    match shape {
        ArtifactShape::Strategist => {
            let mut v = clean.clone();
            v["knowledge_ids"] = json!(["k404"]);
            out.push(("unknown knowledge id".into(), v));
            let mut v = clean.clone();
            v["target_preference"]["p_value"] = json!(0.03);
            out.push(("nested claim".into(), v));
            let mut v = clean.clone();
            v["control_adjustment"][0]["param"] = json!("learning_rate");
            out.push(("unknown control".into(), v));
        }
        _ => {
            let mut v = clean.clone();
            v["candidate_literals"][0]["feature"] = json!("f99");
            out.push(("unknown feature".into(), v));
            let mut v = clean.clone();
            v["candidate_literals"][0]["feature"] = json!("treatment");
            out.push(("forbidden feature".into(), v));
            let mut v = clean.clone();
            v["semantic_matches"][0]["validation_auc"] = json!(0.9);
            out.push(("nested claim".into(), v));
            let mut v = clean.clone();
            v["candidate_literals"][0]["op"] = json!("~=");
            out.push(("unknown operator".into(), v));
        }
    }
    out
}

struct Garbage(usize);

impl Planner for Garbage {
    fn plan(&mut self, _ctx: &PlanningContext) -> Result<PlannerResponse, PlannerError> {
        self.0 += 1;
        Ok(PlannerResponse {
            strategist: "{\"direction\": \"x\", \"p_value\": 0.01}".into(),
            proposer: "not json".into(),
            exchanges: vec![],
        })
    }
    fn kind(&self) -> &'static str {
        "garbage"
    }
}

fn criterion_9() -> Outcome {
    let m = gate_manifest();
    let mut clean_ok = 0;
    let mut rejected = 0;
    let mut total = 0;
    let mut leaks = Vec::new();
    for (clean, shape) in [(clean_strategist(), ArtifactShape::Strategist), (clean_proposer(), ArtifactShape::Proposer)] {
        clean_ok += validate_artifact(&clean.to_string(), shape, &m).is_ok() as usize;
        for (name, v) in mutations(&clean, shape) {
            total += 1;
            if validate_artifact(&v.to_string(), shape, &m).is_err() {
                rejected += 1;
            } else {
                leaks.push(name);
            }
        }
    }
    let cfg = SyntheticConfig::uniform_cohort(800, 4, "f01>0.5", 3);
    let (table, _) = generate_synthetic(&cfg).unwrap();
    let mut sm = synthetic_manifest(&cfg, "abort", 3);
    sm.planner.strictness = Strictness::StrictAbort;
    let mut g = Garbage(0);
    let res = run_round(&RunState::initial(&sm), &sm, &mut g, &table, Execution::Auto);
    let aborted = matches!(res, Err(ControllerError::PlannerFailure(_)));
    (
        clean_ok == 2 && rejected == total && aborted && g.0 == 2,
        format!(
            "clean accepted {clean_ok}/2, fuzzed rejected {rejected}/{total}{}; strict_abort terminated={aborted} after {} planner calls",
            if leaks.is_empty() { String::new() } else { format!(" (accepted: {})", leaks.join(", ")) },
            g.0
        ),
    )
}

// ------------------------------------------------------------------ 10

fn record(method: &str, split: &str, eff: Option<(f64, f64)>) -> ReplayRecord {
    let cell = Cell {
        method: method.into(),
        task: "t".into(),
        split_id: split.into(),
    };
    let mut r = ReplayRecord::empty(&cell);
    if let Some((a, b)) = eff {
        r.skipped = None;
        r.detail = None;
        r.rules = vec!["f01>0.5".into()];
        r.train_effect = Some(a);
        r.holdout_effect = Some(b);
        r.valid_on_holdout = true;
        r.metrics.insert("arr_bad".into(), b);
    }
    r
}

fn criterion_10() -> Outcome {
    let mut complete = Vec::new();
    for m in ["a", "b"] {
        for s in ["1", "2", "3"] {
            let skip = m == "b" && s == "2";
            complete.push(record(m, s, (!skip).then_some((0.1, 0.05))));
        }
    }
    let expected = observed_splits(&complete);
    let sum = paired_aggregate(&complete, &expected).unwrap();
    let accounted = sum.used + sum.skipped.len() == sum.total && sum.total == 6 && sum.skipped.len() == 1;

    let broken: Vec<ReplayRecord> = complete.iter().filter(|r| !(r.method == "a" && r.split_id == "2")).cloned().collect();
    let violation = paired_aggregate(&broken, &expected).err();
    let names_cell = violation
        .as_ref()
        .is_some_and(|v| v.missing.iter().any(|c| c.method == "a" && c.split_id == "2"));

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("records.json");
    fs::write(&path, serde_json::to_string(&broken).unwrap()).unwrap();
    let code = cmd_replay(&ReplayArgs {
        runs: vec![],
        data: tmp.path().join("unused.csv"),
        out: tmp.path().join("out"),
        method: "a".into(),
        best1: true,
        require_paired_splits: true,
        top_k: None,
        extra_records: vec![path],
    })
    .err()
    .map(|e| e.exit_code());
    (
        accounted && names_cell && code == Some(1),
        format!(
            "complete set used {} + skipped {} = total {}; missing (a, split 2) -> PairingViolation={names_cell}, replay exit code {:?}",
            sum.used,
            sum.skipped.len(),
            sum.total,
            code
        ),
    )
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("Pareto oracle equivalence", criterion_1),
        ("Estimator oracle equivalence", criterion_2),
        ("Controller decision table", criterion_3),
        ("Planted-subgroup recovery", criterion_4),
        ("Determinism", criterion_5),
        ("Leakage gate", criterion_6),
        ("Boundary isolation", criterion_7),
        ("Metric formulas", criterion_8),
        ("Artifact gate", criterion_9),
        ("Paired-split accounting", criterion_10),
    ];
    let filter: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if filter.is_some_and(|k| k != n) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += !ok as usize;
        println!(
            "criterion {n:>2} {}: {name} - {detail} [{:.1?}]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
