//! Minimum-cost bipartite assignment between proposals and ground truths.

use crate::error::{Error, Result};

/// One-to-one proposal-to-ground-truth assignment. Proposals absent from
/// `pairs` are background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// (proposal index, gt index) pairs, sorted by proposal index.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn gt_for_proposal(&self, proposal: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(p, _)| *p == proposal)
            .map(|(_, g)| *g)
    }
}

/// Jonker-Volgenant style shortest augmenting path assignment, O(n^3).
/// `cost[i][j]` is the cost of assigning row i (proposal) to column j (gt).
/// Covers min(rows, cols) pairs. Ties resolve to the lowest row index by
/// iteration order, so runs are deterministic.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n_rows = cost.len();
    if n_rows == 0 {
        return Ok(Assignment { pairs: vec![] });
    }
    let n_cols = cost[0].len();
    if n_cols == 0 {
        return Ok(Assignment { pairs: vec![] });
    }
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n_cols {
            return Err(Error::Numeric(format!("ragged cost matrix at row {i}")));
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric(format!("non-finite cost in row {i}")));
        }
    }

    // The augmenting-path formulation wants rows <= cols; transpose if not.
    let transposed = n_rows > n_cols;
    let (r, c) = if transposed {
        (n_cols, n_rows)
    } else {
        (n_rows, n_cols)
    };
    let at = |i: usize, j: usize| -> f64 {
        if transposed {
            cost[j][i]
        } else {
            cost[i][j]
        }
    };

    // 1-indexed potentials, column 0 is the virtual start.
    let mut u = vec![0.0f64; r + 1];
    let mut v = vec![0.0f64; c + 1];
    let mut assigned_row = vec![0usize; c + 1]; // row assigned to each column

    for i in 1..=r {
        let mut j0 = 0usize;
        assigned_row[0] = i;
        let mut min_v = vec![f64::INFINITY; c + 1];
        let mut used = vec![false; c + 1];
        let mut way = vec![0usize; c + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=c {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=c {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(r);
    for j in 1..=c {
        if assigned_row[j] != 0 {
            let (row, col) = (assigned_row[j] - 1, j - 1);
            if transposed {
                pairs.push((col, row));
            } else {
                pairs.push((row, col));
            }
        }
    }
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}

/// Total cost of an assignment under the given matrix.
pub fn assignment_cost(cost: &[Vec<f64>], a: &Assignment) -> f64 {
    a.pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}

#[cfg(test)]
pub(crate) fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    // enumerate all injective row->col maps over min(r, c) pairs
    let r = cost.len();
    let c = cost[0].len();
    if r <= c {
        let mut cols: Vec<usize> = (0..c).collect();
        permute_min(cost, &mut cols, 0, r, false)
    } else {
        let mut rows: Vec<usize> = (0..r).collect();
        permute_min(cost, &mut rows, 0, c, true)
    }
}

#[cfg(test)]
fn permute_min(cost: &[Vec<f64>], pool: &mut Vec<usize>, k: usize, depth: usize, transposed: bool) -> f64 {
    if k == depth {
        let mut total = 0.0;
        for (i, &j) in pool.iter().take(depth).enumerate() {
            total += if transposed { cost[j][i] } else { cost[i][j] };
        }
        return total;
    }
    let mut best = f64::INFINITY;
    for idx in k..pool.len() {
        pool.swap(k, idx);
        best = best.min(permute_min(cost, pool, k + 1, depth, transposed));
        pool.swap(k, idx);
    }
    best
}
