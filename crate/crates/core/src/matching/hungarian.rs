//! Rectangular Kuhn–Munkres via shortest augmenting paths with potentials.

use crate::error::{Error, Result};

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("cost matrix", &[rows, cols], &[data.len()]));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Injective row → column map; row `i` of the cost matrix is ground truth `i`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
    }

    /// Prediction slot matched to each ground truth, or `None` per slot when
    /// viewed from the prediction side.
    pub fn slot_targets(&self, slots: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; slots];
        for &(gt, pred) in &self.pairs {
            out[pred] = Some(gt);
        }
        out
    }

    /// Checks injectivity and index ranges against `gts × slots`.
    pub fn validate(&self, gts: usize, slots: usize) -> Result<()> {
        if self.pairs.len() != gts {
            return Err(Error::contract(format!(
                "assignment covers {} of {gts} ground truths",
                self.pairs.len()
            )));
        }
        let mut seen_gt = vec![false; gts];
        let mut seen_pred = vec![false; slots];
        for &(g, p) in &self.pairs {
            if g >= gts {
                return Err(Error::Index { index: g, len: gts });
            }
            if p >= slots {
                return Err(Error::Index { index: p, len: slots });
            }
            if std::mem::replace(&mut seen_gt[g], true) || std::mem::replace(&mut seen_pred[p], true) {
                return Err(Error::contract("assignment is not injective"));
            }
        }
        Ok(())
    }
}

/// Globally optimal assignment of every row to a distinct column.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.rows, cost.cols);
    if n > m {
        return Err(Error::contract(format!(
            "cannot assign {n} rows to {m} columns"
        )));
    }
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("cost matrix has non-finite entries"));
    }
    if n == 0 {
        return Ok(Assignment::default());
    }
    // 1-based: column 0 is a virtual start, row_of[j] == 0 means free.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| row_of[j] != 0)
        .map(|j| (row_of[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}
