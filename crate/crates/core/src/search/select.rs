use std::collections::BTreeSet;

use super::pareto::pareto_ranks;
use super::Candidate;

/// Unique feature-name sets over valid candidates; 0 when there are none.
pub fn diversity(population: &[Candidate]) -> f64 {
    let valid: Vec<&Candidate> = population.iter().filter(|c| c.validity.is_valid()).collect();
    if valid.is_empty() {
        return 0.0;
    }
    let sets: BTreeSet<String> = valid.iter().map(|c| c.rule.feature_set_key()).collect();
    sets.len() as f64 / valid.len() as f64
}

/// Selection order over scored candidates: Pareto rank, then within a rank
/// candidates whose feature set has not been placed yet, then canonical key.
/// Returns indices into `pool` with their ranks.
pub fn selection_order(pool: &[Candidate]) -> Vec<(usize, usize)> {
    let points: Vec<(f64, f64)> = pool.iter().map(Candidate::objectives).collect();
    let ranks = pareto_ranks(&points);
    let mut by_rank: Vec<usize> = (0..pool.len()).collect();
    by_rank.sort_by(|&a, &b| ranks[a].cmp(&ranks[b]).then_with(|| pool[a].key.cmp(&pool[b].key)));

    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::with_capacity(pool.len());
    let mut i = 0;
    while i < by_rank.len() {
        let r = ranks[by_rank[i]];
        let mut j = i;
        while j < by_rank.len() && ranks[by_rank[j]] == r {
            j += 1;
        }
        let mut rest = Vec::new();
        for &idx in &by_rank[i..j] {
            if seen.insert(pool[idx].rule.feature_set_key()) {
                out.push((idx, r));
            } else {
                rest.push((idx, r));
            }
        }
        out.extend(rest);
        i = j;
    }
    out
}

/// Orders `pool` by [`selection_order`], keeps the first `cap`, and stamps
/// each survivor with its rank.
pub fn select_next(pool: Vec<Candidate>, cap: usize) -> Vec<Candidate> {
    let order = selection_order(&pool);
    let mut slots: Vec<Option<Candidate>> = pool.into_iter().map(Some).collect();
    order
        .into_iter()
        .take(cap)
        .map(|(i, r)| {
            let mut c = slots[i].take().expect("each index appears once");
            c.pareto_rank = Some(r);
            c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::EffectSupport;
    use crate::rule::parse_rule;
    use crate::search::{Origin, OriginKind};

    fn cand(text: &str, effect: f64, support: usize) -> Candidate {
        let rule = parse_rule(text, 3).unwrap();
        Candidate {
            key: rule.canonical_key(),
            rule,
            eval: Some(EffectSupport {
                effect,
                support,
                coverage: 0.5,
                diagnostics: Default::default(),
                blocking_status: None,
            }),
            validity: Default::default(),
            origin: Origin::new(OriginKind::Seed),
            generation: 0,
            pareto_rank: None,
        }
    }

    #[test]
    fn diversity_counts() {
        let same: Vec<Candidate> = (0..10).map(|i| cand(&format!("bmi>{i}"), 0.1, 40)).collect();
        assert!((diversity(&same) - 0.1).abs() < 1e-15);
        let mixed = vec![
            cand("a>1", 0.1, 40),
            cand("a>2", 0.1, 40),
            cand("a>3", 0.1, 40),
            cand("a>1 AND b>1", 0.1, 40),
            cand("b>1", 0.1, 40),
        ];
        assert_eq!(diversity(&mixed[2..]), 1.0);
        assert_eq!(diversity(&[mixed[0].clone(), mixed[1].clone(), mixed[3].clone(), mixed[4].clone()]), 0.75);
        assert_eq!(diversity(&[]), 0.0);
    }

    #[test]
    fn novel_feature_set_first_within_rank() {
        // a>1 takes {a}; a>2 repeats it and b>1 is novel, all on rank 0.
        let pool = vec![cand("a>2", 0.2, 30), cand("b>1", 0.3, 20), cand("a>1", 0.1, 40)];
        let order: Vec<usize> = selection_order(&pool).into_iter().map(|x| x.0).collect();
        assert_eq!(order, vec![2, 1, 0]);
    }

    #[test]
    fn ties_break_by_key() {
        let pool = vec![cand("a>2", 0.2, 30), cand("a>1", 0.2, 30)];
        let order: Vec<usize> = selection_order(&pool).into_iter().map(|x| x.0).collect();
        assert_eq!(order, vec![1, 0]);
    }

    #[test]
    fn cap_evicts_worst_ordered() {
        let archive = vec![
            cand("a>1", 0.2, 30),
            cand("b>1", 0.1, 30),
            cand("c>1", 0.3, 30),
            cand("d>1", 0.1, 60),
            cand("e>1", 0.05, 25),
        ];
        let mut pool = archive.clone();
        pool.push(cand("f>1", 0.25, 50));
        let kept: Vec<String> = select_next(pool, 5).into_iter().map(|c| c.rule.to_string()).collect();
        // ranks after f>1 joins: {c, d, f} 0, a 1, b 2, e 3
        assert_eq!(kept, vec!["c>1", "d>1", "f>1", "a>1", "b>1"]);
    }
}
