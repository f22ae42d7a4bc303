//! Clustering and detection scores: Hungarian-matched accuracy, adjusted
//! Rand index, normalized mutual information, detection accuracy, and the
//! 2-D principal projection used for report plots.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{principal_eigvec, Matrix};

/// Paired predicted/true labels.
#[derive(Debug, Clone)]
pub struct Labeling {
    pub pred: Vec<usize>,
    pub truth: Vec<usize>,
}

impl Labeling {
    pub fn new(pred: Vec<usize>, truth: Vec<usize>) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions vs {} labels",
                pred.len(),
                truth.len()
            )));
        }
        if pred.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { pred, truth })
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }
}

/// The four scores reported together.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsReport {
    pub dda: f64,
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
}

fn contingency(pred: &[usize], truth: &[usize]) -> (Vec<Vec<f64>>, usize, usize) {
    let kp = pred.iter().copied().max().map_or(0, |m| m + 1);
    let kt = truth.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0.0f64; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1.0;
    }
    (table, kp, kt)
}

/// Unsupervised clustering accuracy: the best bijective matching between
/// predicted clusters and true classes, found by rectangular assignment on
/// the contingency table (zero-padded to square).
pub fn acc(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    assert!(!pred.is_empty());
    let (table, kp, kt) = contingency(pred, truth);
    let n = kp.max(kt);
    // minimize negated counts
    let mut cost = Matrix::zeros(n, n);
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            cost.set(i, j, -c);
        }
    }
    let assignment = hungarian_min(&cost);
    let mut matched = 0.0;
    for (i, &j) in assignment.iter().enumerate() {
        if i < kp && j < kt {
            matched += table[i][j];
        }
    }
    matched / pred.len() as f64
}

/// Pair-counting adjusted Rand index with the expected-index correction.
pub fn ari(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    assert!(!pred.is_empty());
    let (table, _, _) = contingency(pred, truth);
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let n = pred.len() as f64;
    let sum_cells: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let sum_cols: f64 = {
        let kt = table.first().map_or(0, Vec::len);
        (0..kt).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum()
    };
    let expected = sum_rows * sum_cols / choose2(n);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-15 {
        return if (sum_cells - expected).abs() < 1e-15 { 1.0 } else { 0.0 };
    }
    (sum_cells - expected) / (max_index - expected)
}

/// Normalized mutual information with the arithmetic-mean normalization.
pub fn nmi(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    assert!(!pred.is_empty());
    let (table, kp, kt) = contingency(pred, truth);
    let n = pred.len() as f64;
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..kt).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for i in 0..kp {
        for j in 0..kt {
            let nij = table[i][j];
            if nij > 0.0 {
                mi += nij / n * ((n * nij) / (row_sums[i] * col_sums[j])).ln();
            }
        }
    }
    let entropy = |sums: &[f64]| -> f64 {
        sums.iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| {
                let p = s / n;
                -p * p.ln()
            })
            .sum()
    };
    let h = 0.5 * (entropy(&row_sums) + entropy(&col_sums));
    if h < 1e-15 {
        // both partitions trivial: identical by construction
        return 1.0;
    }
    (mi / h).clamp(0.0, 1.0)
}

/// Damage detection accuracy: fraction of samples whose anomaly flag agrees
/// with the binary ground truth (label 0 = healthy).
pub fn dda(flags: &[bool], truth: &[usize]) -> f64 {
    assert_eq!(flags.len(), truth.len());
    assert!(!flags.is_empty());
    let correct = flags.iter().zip(truth).filter(|(&f, &t)| f == (t != 0)).count();
    correct as f64 / flags.len() as f64
}

/// Projection of row vectors onto their top-2 principal axes (power
/// iteration with deflation; the second axis falls back to zero on
/// rank-deficient data).
pub fn pca2d(z: &Matrix) -> Result<Matrix> {
    if z.rows() < 2 {
        return Err(Error::EmptyDataset);
    }
    let n = z.rows();
    let d = z.cols();
    let mut mean = vec![0.0; d];
    for row in 0..n {
        for (m, &v) in mean.iter_mut().zip(z.row(row)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = z.clone();
    for row in 0..n {
        for (v, m) in centered.row_mut(row).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = centered.matmul_tn(&centered).scale(1.0 / n as f64);

    let axis1 = match principal_eigvec(&cov) {
        Ok(v) => v,
        Err(Error::NoConvergence(_)) => {
            // fully degenerate data: all coordinates zero
            return Ok(Matrix::zeros(n, 2));
        }
        Err(e) => return Err(e),
    };
    let lambda1 = cov.quad_form(&axis1);
    let mut deflated = cov.clone();
    deflated.add_scaled_assign(&Matrix::outer(&axis1, &axis1), -lambda1);
    let axis2 = match principal_eigvec(&deflated) {
        // rank-deficient data leaves only numerical dust after deflation;
        // power iteration then "converges" to an arbitrary direction
        Ok(v) if deflated.quad_form(&v) > 1e-9 * lambda1.max(1e-300) => v,
        Ok(_) | Err(Error::NoConvergence(_)) => vec![0.0; d],
        Err(e) => return Err(e),
    };

    let mut out = Matrix::zeros(n, 2);
    for row in 0..n {
        let zr = centered.row(row);
        out.set(row, 0, crate::numerics::dot(zr, &axis1));
        out.set(row, 1, crate::numerics::dot(zr, &axis2));
    }
    Ok(out)
}

/// Minimum-cost perfect assignment on a square cost matrix (shortest
/// augmenting path with potentials, O(n³)). Returns the column assigned to
/// each row.
pub fn hungarian_min(cost: &Matrix) -> Vec<usize> {
    assert_eq!(cost.rows(), cost.cols(), "cost matrix must be square");
    let n = cost.rows();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // row matched to each column (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
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
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
#[path = "metrics_tests.rs"]
mod tests;
