//! Minimum-cost injective assignment of ground truths (rows) to queries (columns).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `assignment[g]` is the query matched to ground truth `g`.
    pub assignment: Vec<usize>,
    /// `Σ_g cost[g][assignment[g]]`, summed in row order.
    pub cost: f64,
}

/// Row-major `rows x cols` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "cost_matrix",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::arg("cost_matrix", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn assignment_cost(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(g, &q)| self.get(g, q)).sum()
    }
}

/// Shortest-augmenting-path Hungarian solve over the free rows/columns.
/// Returns `row -> col` for free rows (fixed rows keep their column).
fn solve(cost: &CostMatrix, fixed: &[Option<usize>]) -> Vec<usize> {
    let free_rows: Vec<usize> = (0..cost.rows).filter(|&r| fixed[r].is_none()).collect();
    let mut taken = vec![false; cost.cols];
    for c in fixed.iter().flatten() {
        taken[*c] = true;
    }
    let free_cols: Vec<usize> = (0..cost.cols).filter(|&c| !taken[c]).collect();
    let n = free_rows.len();
    let m = free_cols.len();
    let a = |i: usize, j: usize| cost.get(free_rows[i - 1], free_cols[j - 1]);

    // 1-based potentials; p[j] = row matched to column j (0 = none).
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<usize> = fixed.iter().map(|f| f.unwrap_or(usize::MAX)).collect();
    for j in 1..=m {
        if p[j] != 0 {
            out[free_rows[p[j] - 1]] = free_cols[j - 1];
        }
    }
    out
}

fn tie_tolerance(c: f64) -> f64 {
    1e-9 * (1.0 + c.abs())
}

/// Globally minimal assignment; among optimal assignments the
/// lexicographically smallest `assignment` vector wins.
pub fn hungarian_match(cost: &CostMatrix) -> Result<MatchResult> {
    if cost.rows > cost.cols {
        return Err(Error::arg(
            "hungarian_match",
            format!("{} ground truths exceed {} queries", cost.rows, cost.cols),
        ));
    }
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matching cost".into()));
    }
    let mut fixed = vec![None; cost.rows];
    let mut best = solve(cost, &fixed);
    let optimum = cost.assignment_cost(&best);
    for g in 0..cost.rows {
        for q in 0..best[g] {
            if fixed.contains(&Some(q)) {
                continue;
            }
            fixed[g] = Some(q);
            let trial = solve(cost, &fixed);
            if cost.assignment_cost(&trial) <= optimum + tie_tolerance(optimum) {
                best = trial;
                break;
            }
            fixed[g] = None;
        }
        fixed[g] = Some(best[g]);
    }
    Ok(MatchResult {
        cost: cost.assignment_cost(&best),
        assignment: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng as _;

    /// Exhaustive minimum over injective maps, visited in lexicographic order.
    fn brute_force(cost: &CostMatrix) -> (Vec<usize>, f64) {
        fn rec(cost: &CostMatrix, g: usize, used: &mut [bool], cur: &mut Vec<usize>, best: &mut Option<(Vec<usize>, f64)>) {
            if g == cost.rows {
                let c = cost.assignment_cost(cur);
                if best.as_ref().is_none_or(|(_, b)| c < *b - tie_tolerance(*b)) {
                    *best = Some((cur.clone(), c));
                }
                return;
            }
            for q in 0..cost.cols {
                if !used[q] {
                    used[q] = true;
                    cur.push(q);
                    rec(cost, g + 1, used, cur, best);
                    cur.pop();
                    used[q] = false;
                }
            }
        }
        let mut best = None;
        rec(cost, 0, &mut vec![false; cost.cols], &mut Vec::new(), &mut best);
        best.unwrap()
    }

    #[test]
    fn diagonal_dominant_is_identity() {
        let n = 5;
        let c = CostMatrix::new(n, n, (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect()).unwrap();
        let m = hungarian_match(&c).unwrap();
        assert_eq!(m.assignment, vec![0, 1, 2, 3, 4]);
        assert_eq!(m.cost, 0.0);
    }

    #[test]
    fn three_by_three_hand_case() {
        let c = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]]).unwrap();
        let m = hungarian_match(&c).unwrap();
        assert_eq!(m.assignment, vec![1, 0, 2]);
        assert_eq!(m.cost, 5.0);
    }

    #[test]
    fn more_truths_than_queries_is_error() {
        let c = CostMatrix::new(3, 2, vec![0.0; 6]).unwrap();
        assert!(hungarian_match(&c).is_err());
    }

    #[test]
    fn empty_and_all_equal() {
        let m = hungarian_match(&CostMatrix::new(0, 4, vec![]).unwrap()).unwrap();
        assert!(m.assignment.is_empty());
        let m = hungarian_match(&CostMatrix::new(3, 4, vec![1.0; 12]).unwrap()).unwrap();
        assert_eq!(m.assignment, vec![0, 1, 2]);
    }

    #[test]
    fn matches_exhaustive_minimum_on_random_instances() {
        let mut rng = stream(2024);
        for case in 0..500 {
            let n = rng.random_range(1..=7);
            let g = rng.random_range(0..=n);
            // small integer costs make ties common
            let integer = case % 2 == 0;
            let data = (0..g * n)
                .map(|_| if integer { rng.random_range(0..4) as f64 } else { rng.random_range(-2.0..2.0) })
                .collect();
            let c = CostMatrix::new(g, n, data).unwrap();
            let m = hungarian_match(&c).unwrap();
            if g == 0 {
                assert!(m.assignment.is_empty());
                continue;
            }
            let (a, cost) = brute_force(&c);
            assert_eq!(m.assignment, a, "case {case}");
            assert_eq!(m.cost, cost, "case {case}");
        }
    }

    #[test]
    fn constant_shift_keeps_assignment() {
        let mut rng = stream(77);
        for _ in 0..100 {
            let (g, n) = (rng.random_range(1..=6), 7);
            let data: Vec<f64> = (0..g * n).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = hungarian_match(&CostMatrix::new(g, n, data.clone()).unwrap()).unwrap();
            let shifted = data.iter().map(|v| v + 3.5).collect();
            let b = hungarian_match(&CostMatrix::new(g, n, shifted).unwrap()).unwrap();
            assert_eq!(a.assignment, b.assignment);
        }
    }
}
