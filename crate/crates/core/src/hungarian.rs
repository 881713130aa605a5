//! Minimum-cost square assignment (Kuhn–Munkres with potentials, O(n³)).
//!
//! Among several optimal assignments the lexicographically smallest one is
//! returned: rows are fixed in order, each to the lowest column that still
//! admits an optimal completion. That pass costs O(n⁵) and is meant for the
//! small matrices used in component alignment.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `columns[i]` is the column assigned to row `i`.
    pub columns: Vec<usize>,
    pub cost: f64,
}

/// Total cost of `columns` summed in row order.
pub fn assignment_cost(cost: &Matrix, columns: &[usize]) -> f64 {
    columns.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
}

pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let n = cost.rows();
    if n != cost.cols() {
        return Err(Error::dims(format!("cost matrix is {}x{}, expected square", cost.rows(), cost.cols())));
    }
    if !cost.is_finite() {
        return Err(Error::invalid("cost matrix contains non-finite values"));
    }
    if n == 0 {
        return Ok(Assignment { columns: vec![], cost: 0.0 });
    }

    let rows: Vec<usize> = (0..n).collect();
    let optimum = solve(cost, &rows, &rows);
    let optimum_cost: f64 = optimum.iter().enumerate().map(|(k, &j)| cost.get(k, j)).sum();
    let scale = cost.as_slice().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * (1.0 + scale * n as f64);

    let mut columns = Vec::with_capacity(n);
    let mut free: Vec<usize> = (0..n).collect();
    let mut fixed_cost = 0.0;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (slot, &j) in free.iter().enumerate() {
            let rest_cols: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let rest = solve(cost, &rest_rows, &rest_cols);
            let rest_cost: f64 = rest.iter().zip(&rest_rows).map(|(&c, &r)| cost.get(r, c)).sum();
            if fixed_cost + cost.get(i, j) + rest_cost <= optimum_cost + tol {
                chosen = Some(slot);
                break;
            }
        }
        // numerical corner case: fall back to the unrefined optimum for this row
        let slot = chosen.unwrap_or_else(|| free.iter().position(|&c| c == optimum[i]).unwrap_or(0));
        let j = free.remove(slot);
        fixed_cost += cost.get(i, j);
        columns.push(j);
    }
    let total = assignment_cost(cost, &columns);
    Ok(Assignment { columns, cost: total })
}

/// Optimal assignment of the sub-matrix `rows × cols` (equal lengths). Returns,
/// for each entry of `rows`, the chosen column (an element of `cols`).
fn solve(cost: &Matrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    if n == 0 {
        return vec![];
    }
    let c = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    // 1-based potentials formulation; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < min_v[j] {
                        min_v[j] = cur;
                        way[j] = j0;
                    }
                    if min_v[j] < delta {
                        delta = min_v[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[matched_row[j] - 1] = cols[j - 1];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn diagonal_minimum() {
        let a = hungarian(&m(&[vec![1.0, 2.0], vec![2.0, 1.0]])).unwrap();
        assert_eq!(a.columns, vec![0, 1]);
        assert_eq!(a.cost, 2.0);
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let a = hungarian(&Matrix::filled(4, 4, 3.0)).unwrap();
        assert_eq!(a.columns, vec![0, 1, 2, 3]);
        assert_eq!(a.cost, 12.0);

        // row 1 must take column 0; rows 0 and 2 tie over columns 1 and 2
        let c = m(&[vec![5.0, 1.0, 1.0], vec![1.0, 5.0, 5.0], vec![5.0, 1.0, 1.0]]);
        assert_eq!(hungarian(&c).unwrap().columns, vec![1, 0, 2]);
    }

    #[test]
    fn anti_diagonal() {
        let c = m(&[vec![9.0, 9.0, 1.0], vec![9.0, 1.0, 9.0], vec![1.0, 9.0, 9.0]]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.columns, vec![2, 1, 0]);
        assert_eq!(a.cost, 3.0);
    }

    #[test]
    fn rejects_non_square() {
        assert!(hungarian(&Matrix::zeros(2, 3)).is_err());
        assert_eq!(hungarian(&Matrix::zeros(0, 0)).unwrap().columns, Vec::<usize>::new());
    }
}
