//! Clustering accuracy via optimal assignment, and normalized mutual
//! information.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};

/// Co-occurrence counts of predicted clusters (rows) and true labels
/// (columns), with labels mapped to dense indices in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<usize>>,
    pub row_sums: Vec<usize>,
    pub col_sums: Vec<usize>,
    pub n: usize,
}

fn dense(labels: &[usize]) -> (Vec<usize>, usize) {
    let map: BTreeMap<usize, usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    (labels.iter().map(|l| map[l]).collect(), map.len())
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return invalid(format!("{} predictions for {} labels", pred.len(), truth.len()));
        }
        if pred.is_empty() {
            return invalid("clustering metrics need at least one sample");
        }
        let (p, kp) = dense(pred);
        let (t, kt) = dense(truth);
        let mut counts = vec![vec![0; kt]; kp];
        for (&i, &j) in p.iter().zip(&t) {
            counts[i][j] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..kt).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            n: pred.len(),
        })
    }
}

/// Minimum-cost perfect assignment on a square matrix (Kuhn-Munkres with
/// potentials). Returns `col_of[row]`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; p[j] is the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[p[j] - 1] = j - 1;
    }
    col_of
}

/// Fraction of samples correct after the one-to-one mapping of predicted
/// clusters to labels that maximizes matches.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let size = table.counts.len().max(table.col_sums.len());
    let cell = |i: usize, j: usize| table.counts.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0);
    let cost: Vec<Vec<f64>> = (0..size)
        .map(|i| (0..size).map(|j| -(cell(i, j) as f64)).collect())
        .collect();
    let matched: usize = hungarian(&cost).iter().enumerate().map(|(i, &j)| cell(i, j)).sum();
    Ok(matched as f64 / table.n as f64)
}

/// Normalized mutual information with natural logarithms and
/// geometric-mean normalization. Partitions equal up to renaming score
/// exactly 1. When either partition has a single cluster the denominator
/// vanishes; the score is then 1 if both are single clusters and 0
/// otherwise.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(pred, truth)?;
    let one_per_row = t.counts.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1);
    if one_per_row && t.row_sums.len() == t.col_sums.len() {
        return Ok(1.0);
    }
    let n = t.n as f64;
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c * (n * c / (t.row_sums[i] as f64 * t.col_sums[j] as f64)).ln();
            }
        }
    }
    let entropy = |sums: &[usize]| -> f64 { sums.iter().map(|&s| s as f64 * (s as f64 / n).ln()).sum() };
    let den = (entropy(&t.row_sums) * entropy(&t.col_sums)).sqrt();
    if den == 0.0 {
        return Ok(if t.row_sums.len() == 1 && t.col_sums.len() == 1 {
            1.0
        } else {
            0.0
        });
    }
    Ok((mi / den).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_cases() {
        assert_eq!(clustering_accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn identical_and_renamed_partitions() {
        let truth = [0, 1, 2, 2, 1, 0, 3];
        let renamed: Vec<usize> = truth.iter().map(|&l| [7, 3, 9, 1][l]).collect();
        for p in [&truth[..], &renamed] {
            assert_eq!(clustering_accuracy(p, &truth).unwrap(), 1.0);
            assert_eq!(nmi(p, &truth).unwrap(), 1.0);
        }
    }

    #[test]
    fn degenerate_single_clusters() {
        assert_eq!(nmi(&[4, 4, 4], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[4, 4, 4], &[1, 2, 1]).unwrap(), 0.0);
        assert!(nmi(&[], &[]).is_err());
    }

    #[test]
    fn more_clusters_than_labels() {
        assert_eq!(clustering_accuracy(&[0, 1, 2, 3], &[0, 0, 1, 1]).unwrap(), 0.5);
    }
}
