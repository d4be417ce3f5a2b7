//! Minimum-cost perfect matching (Hungarian method, O(n³)).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// `assignment[agent] = landmark`.
    pub assignment: Vec<usize>,
    /// Sum of matched costs, accumulated in agent order.
    pub total_cost: f64,
    pub mean_cost: f64,
}

/// Relative slack under which two assignment costs count as tied.
const TIE_TOL: f64 = 1e-12;

/// Optimal assignment for a square, finite, nonnegative cost matrix.
///
/// Among optimal assignments, the lexicographically smallest permutation
/// is returned.
pub fn min_cost_matching(cost: &[Vec<f64>]) -> Result<Matching> {
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(Error::argument(format!(
                "cost matrix must be square: {n} rows but row {i} has {} entries",
                row.len()
            )));
        }
        if row.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::argument(format!(
                "cost matrix row {i} has a negative or non-finite entry"
            )));
        }
    }
    if n == 0 {
        return Ok(Matching {
            assignment: Vec::new(),
            total_cost: 0.0,
            mean_cost: 0.0,
        });
    }

    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..n).collect();
    let (_, optimum) = hungarian(cost, &rows, &cols);
    let tol = TIE_TOL * optimum.abs().max(1.0);

    // Fix agents one at a time to the smallest landmark index that still
    // admits an optimal completion.
    let mut assignment = vec![usize::MAX; n];
    let mut free_cols = cols;
    let mut fixed = 0.0;
    for agent in 0..n {
        let rest_rows: Vec<usize> = (agent + 1..n).collect();
        let mut chosen = None;
        for (slot, &col) in free_cols.iter().enumerate() {
            let mut rest_cols = free_cols.clone();
            rest_cols.remove(slot);
            let (_, rest) = hungarian(cost, &rest_rows, &rest_cols);
            if fixed + cost[agent][col] + rest <= optimum + tol {
                chosen = Some(slot);
                break;
            }
        }
        // The optimum is always reachable from a feasible prefix; fall back
        // to the cheapest column only against pathological rounding.
        let slot = chosen.unwrap_or_else(|| {
            (0..free_cols.len())
                .min_by(|&a, &b| cost[agent][free_cols[a]].total_cmp(&cost[agent][free_cols[b]]))
                .unwrap()
        });
        let col = free_cols.remove(slot);
        assignment[agent] = col;
        fixed += cost[agent][col];
    }

    let total_cost: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Matching {
        assignment,
        total_cost,
        mean_cost: total_cost / n as f64,
    })
}

/// Hungarian method on the submatrix `cost[rows][cols]` (equal lengths).
/// Returns the assignment (positions into `cols`) and its cost.
fn hungarian(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let c = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| c(i + 1, j + 1)).sum();
    (assignment, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_favorable() {
        let m = min_cost_matching(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(m.assignment, vec![0, 1]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn all_equal_picks_lexicographically_smallest() {
        let m = min_cost_matching(&vec![vec![2.0; 4]; 4]).unwrap();
        assert_eq!(m.assignment, vec![0, 1, 2, 3]);
        assert_eq!(m.total_cost, 8.0);
        assert_eq!(m.mean_cost, 2.0);
    }

    #[test]
    fn partial_ties_resolved_lexicographically() {
        // optimal set: {(0→1,1→0,2→2), (0→2,1→0,2→1)} with cost 2
        let cost = vec![
            vec![5.0, 1.0, 1.0],
            vec![1.0, 5.0, 5.0],
            vec![5.0, 0.0, 0.0],
        ];
        let m = min_cost_matching(&cost).unwrap();
        assert_eq!(m.assignment, vec![1, 0, 2]);
        assert_eq!(m.total_cost, 2.0);
    }

    #[test]
    fn non_square_rejected() {
        let err = min_cost_matching(&[vec![1.0, 2.0]]).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn negative_cost_rejected() {
        assert!(min_cost_matching(&[vec![-1.0]]).is_err());
    }

    #[test]
    fn single_entry() {
        let m = min_cost_matching(&[vec![0.25]]).unwrap();
        assert_eq!(m.assignment, vec![0]);
        assert_eq!(m.mean_cost, 0.25);
    }
}
