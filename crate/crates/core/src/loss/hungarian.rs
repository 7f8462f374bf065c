//! Exact minimum-cost bipartite assignment.

/// Matched `(prediction, ground truth)` pairs, sorted by prediction index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the matched costs, accumulated in pair order.
    pub cost: f64,
}

impl MatchResult {
    /// Ground-truth index assigned to each prediction, if any.
    pub fn assignment(&self, preds: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; preds];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

/// Shortest-augmenting-path assignment (Jonker-Volgenant style potentials) for
/// a row-major `rows x cols` table with `rows <= cols`. Returns the column of every row.
fn solve_wide(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols);
    let at = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal cost over the sub-table selected by `rows` x `cols`, matching `min` of the two.
fn optimum(cost: &[f64], stride: usize, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let (r, c) = (rows.len(), cols.len());
    if r <= c {
        let sub: Vec<f64> = rows.iter().flat_map(|&i| cols.iter().map(move |&j| cost[i * stride + j])).collect();
        solve_wide(&sub, r, c).iter().enumerate().map(|(i, &j)| sub[i * c + j]).sum()
    } else {
        let sub: Vec<f64> = cols.iter().flat_map(|&j| rows.iter().map(move |&i| cost[i * stride + j])).collect();
        solve_wide(&sub, c, r).iter().enumerate().map(|(j, &i)| sub[j * r + i]).sum()
    }
}

/// Minimum-cost matching of `min(P, G)` pairs on a row-major `[P, G]` table.
///
/// Among several optimal assignments the lexicographically smallest sorted pair
/// list is returned: predictions are fixed in index order, each taking the
/// smallest ground truth that still admits an optimal completion.
pub fn hungarian_match(cost: &[f64], preds: usize, gts: usize) -> MatchResult {
    assert_eq!(cost.len(), preds * gts, "cost table must be [P, G]");
    if preds == 0 || gts == 0 {
        return MatchResult::default();
    }
    let all_rows: Vec<usize> = (0..preds).collect();
    let all_cols: Vec<usize> = (0..gts).collect();
    let best = optimum(cost, gts, &all_rows, &all_cols);
    let scale = cost.iter().fold(0.0f64, |m, c| m.max(c.abs())) * preds.min(gts) as f64;
    let tol = 1e-12 * (1.0 + scale);
    let target = preds.min(gts);

    let mut pairs = Vec::with_capacity(target);
    let mut free_cols = all_cols;
    let mut fixed = 0.0;
    for p in 0..preds {
        if pairs.len() == target {
            break;
        }
        let rest: Vec<usize> = (p + 1..preds).collect();
        let mut chosen = None;
        for (slot, &g) in free_cols.iter().enumerate() {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != g).collect();
            if pairs.len() + 1 + rest.len().min(cols.len()) < target {
                continue;
            }
            let c = fixed + cost[p * gts + g] + optimum(cost, gts, &rest, &cols);
            if c <= best + tol {
                chosen = Some(slot);
                break;
            }
        }
        if let Some(slot) = chosen {
            let g = free_cols.remove(slot);
            fixed += cost[p * gts + g];
            pairs.push((p, g));
        }
    }
    let cost = pairs.iter().map(|&(p, g)| cost[p * gts + g]).sum();
    MatchResult { pairs, cost }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        assert_eq!(hungarian_match(&[3.0], 1, 1).pairs, vec![(0, 0)]);
        let m = hungarian_match(&[1.0, 2.0, 2.0, 1.0], 2, 2);
        assert_eq!((m.pairs, m.cost), (vec![(0, 0), (1, 1)], 2.0));
        let m = hungarian_match(&[1.0, 9.0, 9.0, 1.0, 5.0, 5.0], 3, 2);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.assignment(3), vec![Some(0), Some(1), None]);
        assert!(hungarian_match(&[], 4, 0).pairs.is_empty());
    }

    #[test]
    fn ties_resolve_lexicographically() {
        // every assignment costs the same
        let m = hungarian_match(&[1.0; 6], 2, 3);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        let m = hungarian_match(&[1.0; 6], 3, 2);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        // two optima: {(0,1),(1,0)} and {(0,0),(1,1)}
        let m = hungarian_match(&[1.0, 1.0, 1.0, 1.0], 2, 2);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        let m = hungarian_match(&[2.0, 1.0, 1.0, 2.0, 9.0, 9.0], 3, 2);
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
    }
}
