/// `a` dominates `b`: no worse in both objectives and strictly better in one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Nondominated sorting rank of every point (0 = frontier) under joint
/// maximization of both coordinates.
///
/// Points are swept in descending (first, second) order; each layer keeps
/// the last point it received, which carries the layer's largest second
/// coordinate, so the layer test is a single comparison and the layer is
/// found by binary search.
pub fn pareto_ranks(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .0
            .total_cmp(&points[a].0)
            .then(points[b].1.total_cmp(&points[a].1))
    });
    let mut tails: Vec<(f64, f64)> = Vec::new();
    let mut ranks = vec![0; points.len()];
    for i in order {
        let p = points[i];
        let r = tails.partition_point(|&t| dominates(t, p));
        if r == tails.len() {
            tails.push(p);
        } else {
            tails[r] = p;
        }
        ranks[i] = r;
    }
    ranks
}

/// Indices of the nondominated points, ascending.
pub fn frontier_indices(points: &[(f64, f64)]) -> Vec<usize> {
    pareto_ranks(points)
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| (r == 0).then_some(i))
        .collect()
}
