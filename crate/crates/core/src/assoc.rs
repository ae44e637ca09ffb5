//! Linear assignment and similarity gating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Cost given to padding cells when a rectangular matrix is squared up.
pub const PAD_COST: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Matching {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    /// Sum over `pairs` of the cost (for [`hungarian`]) or similarity (for
    /// [`match_with_threshold`]).
    pub total_score: f64,
}

impl Matching {
    fn from_assignment(rows: usize, cols: usize, pairs: Vec<(usize, usize)>, score: f64) -> Self {
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &pairs {
            row_used[r] = true;
            col_used[c] = true;
        }
        Self {
            pairs,
            unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
            total_score: score,
        }
    }
}

/// Minimum-cost assignment on the square-padded matrix (shortest augmenting
/// paths with potentials, O(n³)). Ties are broken by scan order, so equal
/// inputs always give equal outputs.
pub fn hungarian(cost: &Matrix) -> Matching {
    let (m, n) = cost.shape();
    if m == 0 || n == 0 {
        return Matching::from_assignment(m, n, Vec::new(), 0.0);
    }
    let size = m.max(n);
    let at = |r: usize, c: usize| {
        if r < m && c < n {
            cost.get(r, c)
        } else {
            PAD_COST
        }
    };
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut owner = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for row in 1..=size {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=size {
                if used[c] {
                    continue;
                }
                let reduced = at(r0 - 1, c - 1) - u[r0] - v[c];
                if reduced < minv[c] {
                    minv[c] = reduced;
                    way[c] = col0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    col1 = c;
                }
            }
            for c in 0..=size {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; size];
    for c in 1..=size {
        if owner[c] > 0 {
            assign[owner[c] - 1] = c - 1;
        }
    }
    let pairs: Vec<(usize, usize)> = (0..m)
        .filter(|&r| assign[r] < n)
        .map(|r| (r, assign[r]))
        .collect();
    let total = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Matching::from_assignment(m, n, pairs, total)
}

/// Exhaustive minimum over all maximal one-to-one assignments, summing costs
/// in row order. Exponential; only for small oracle checks.
pub fn brute_force_min_cost(cost: &Matrix) -> f64 {
    let (m, n) = cost.shape();
    if m == 0 || n == 0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    let mut used = vec![false; n];
    let mut chosen = vec![usize::MAX; m];
    fn rec(
        cost: &Matrix,
        row: usize,
        assigned: usize,
        used: &mut [bool],
        chosen: &mut [usize],
        best: &mut f64,
    ) {
        let (m, n) = cost.shape();
        if row == m {
            if assigned == m.min(n) {
                let total: f64 = (0..m)
                    .filter(|&r| chosen[r] != usize::MAX)
                    .map(|r| cost.get(r, chosen[r]))
                    .sum();
                if total < *best {
                    *best = total;
                }
            }
            return;
        }
        for c in 0..n {
            if !used[c] {
                used[c] = true;
                chosen[row] = c;
                rec(cost, row + 1, assigned + 1, used, chosen, best);
                used[c] = false;
                chosen[row] = usize::MAX;
            }
        }
        // With more rows than columns some rows stay unassigned.
        if m - row - 1 >= m.min(n) - assigned {
            rec(cost, row + 1, assigned, used, chosen, best);
        }
    }
    rec(cost, 0, 0, &mut used, &mut chosen, &mut best);
    best
}

/// Cosine similarity of every row pair, negatives clamped to 0; a zero
/// vector is dissimilar to everything.
pub fn cosine_similarity(a: &[Vec<f64>], b: &[Vec<f64>]) -> Matrix {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let na: Vec<f64> = a.iter().map(|v| norm(v)).collect();
    let nb: Vec<f64> = b.iter().map(|v| norm(v)).collect();
    Matrix::from_fn(a.len(), b.len(), |r, c| {
        if na[r] == 0.0 || nb[c] == 0.0 {
            return 0.0;
        }
        let dot: f64 = a[r].iter().zip(&b[c]).map(|(x, y)| x * y).sum();
        (dot / (na[r] * nb[c])).clamp(0.0, 1.0)
    })
}

/// `λ·s_app + (1−λ)·s_iou`.
pub fn fuse_similarity(s_app: &Matrix, s_iou: &Matrix, lambda_app: f64) -> Result<Matrix> {
    if s_app.shape() != s_iou.shape() {
        let (a, b) = (s_app.shape(), s_iou.shape());
        return Err(Error::Shape {
            op: "fuse_similarity",
            left: vec![a.0, a.1],
            right: vec![b.0, b.1],
        });
    }
    if !(0.0..=1.0).contains(&lambda_app) {
        return Err(Error::Config(format!(
            "appearance weight {lambda_app} is outside [0, 1]"
        )));
    }
    Ok(Matrix::from_fn(s_app.rows(), s_app.cols(), |r, c| {
        lambda_app * s_app.get(r, c) + (1.0 - lambda_app) * s_iou.get(r, c)
    }))
}

/// Assignment on `1 − s`, keeping only pairs with `s ≥ θ`.
pub fn match_with_threshold(s: &Matrix, theta: f64) -> Matching {
    let raw = hungarian(&s.map(|v| 1.0 - v));
    let pairs: Vec<(usize, usize)> = raw
        .pairs
        .into_iter()
        .filter(|&(r, c)| s.get(r, c) >= theta)
        .collect();
    let score = pairs.iter().map(|&(r, c)| s.get(r, c)).sum();
    Matching::from_assignment(s.rows(), s.cols(), pairs, score)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_handles_tall_matrices() {
        let c = Matrix::from_rows(&[&[3.0], &[1.0], &[2.0]]);
        assert_eq!(brute_force_min_cost(&c), 1.0);
        assert_eq!(hungarian(&c).pairs, vec![(1, 0)]);
    }
}
