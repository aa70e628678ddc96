//! Clustering evaluation: optimal-assignment accuracy, adjusted Rand index
//! and macro-averaged accuracy, plus the composition that aligns a learned
//! relation matrix before taking the graph edit distance.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::relations::{self, RelationMatrix};

/// Evaluation summary. `matched_permutation[p] = t` maps predicted label `p`
/// to ground-truth label `t`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub ari: f64,
    pub macro_accuracy: f64,
    pub ged: usize,
    pub matched_permutation: Vec<usize>,
}

fn check_labels(pred: &[usize], truth: &[usize], bound: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions but {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidConfig("empty label vectors".into()));
    }
    for &l in pred.iter().chain(truth) {
        if l >= bound {
            return Err(Error::LabelOutOfRange { label: l, bound });
        }
    }
    Ok(())
}

/// Counts of (predicted, true) label pairs as a `k x k` matrix.
fn contingency(pred: &[usize], truth: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut table = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    table
}

/// Minimum-cost perfect assignment on a square cost matrix via the O(n^3)
/// potentials method. Returns `assign[row] = col`. Deterministic: ties fall
/// to the lowest column index scanned first.
pub(crate) fn hungarian_min_cost(cost: &DenseMatrix) -> Result<Vec<usize>> {
    if cost.rows() != cost.cols() {
        return Err(Error::DimensionMismatch(format!(
            "assignment needs a square matrix, got {}x{}",
            cost.rows(),
            cost.cols()
        )));
    }
    let n = cost.rows();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
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
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

/// Clustering accuracy: the match rate maximized over all permutations of
/// predicted labels, computed by optimal assignment on the negated
/// contingency table. Unused predicted labels contribute all-zero rows, i.e.
/// zero-cost padding.
pub fn clustering_accuracy(
    pred: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<(f64, Vec<usize>)> {
    check_labels(pred, truth, num_classes)?;
    let table = contingency(pred, truth, num_classes);
    let mut cost = DenseMatrix::zeros(num_classes, num_classes);
    for (p, row) in table.iter().enumerate() {
        for (t, &count) in row.iter().enumerate() {
            cost.set(p, t, -(count as f64));
        }
    }
    let perm = hungarian_min_cost(&cost)?;
    let matched: usize = perm.iter().enumerate().map(|(p, &t)| table[p][t]).sum();
    Ok((matched as f64 / pred.len() as f64, perm))
}

fn choose2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index via the pair-counting contingency formulation.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} labels",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidConfig("empty label vectors".into()));
    }
    let k_a = a.iter().max().unwrap() + 1;
    let k_b = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; k_b]; k_a];
    let mut rows = vec![0usize; k_a];
    let mut cols = vec![0usize; k_b];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let sum_cells: f64 = table
        .iter()
        .flat_map(|r| r.iter())
        .map(|&c| choose2(c))
        .sum();
    let sum_rows: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let total = choose2(a.len());
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if max_index == expected {
        // both partitions trivial (all singletons or a single cluster)
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max_index - expected))
}

/// Unweighted mean of per-class recall under the matched permutation.
/// Ground-truth classes with no samples are excluded and returned.
pub fn macro_accuracy(
    pred: &[usize],
    truth: &[usize],
    num_classes: usize,
    permutation: &[usize],
) -> Result<(f64, Vec<usize>)> {
    check_labels(pred, truth, num_classes)?;
    if permutation.len() != num_classes {
        return Err(Error::DimensionMismatch(format!(
            "permutation has {} entries, expected {num_classes}",
            permutation.len()
        )));
    }
    let mut per_class_total = vec![0usize; num_classes];
    let mut per_class_hit = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        per_class_total[t] += 1;
        if permutation[p] == t {
            per_class_hit[t] += 1;
        }
    }
    let mut excluded = Vec::new();
    let mut sum = 0.0;
    let mut present = 0usize;
    for t in 0..num_classes {
        if per_class_total[t] == 0 {
            excluded.push(t);
        } else {
            sum += per_class_hit[t] as f64 / per_class_total[t] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::InvalidConfig("no ground-truth classes present".into()));
    }
    Ok((sum / present as f64, excluded))
}

/// Full evaluation: accuracy with its matching, ARI, macro accuracy, and the
/// edit distance between the learned relation graph (rows re-indexed by the
/// accuracy-optimal permutation) and the reference graph.
pub fn evaluate(
    pred: &[usize],
    truth: &[usize],
    num_classes: usize,
    learned: &RelationMatrix,
    reference: &RelationMatrix,
) -> Result<MetricsReport> {
    let (accuracy, permutation) = clustering_accuracy(pred, truth, num_classes)?;
    let ari = adjusted_rand_index(pred, truth)?;
    let (macro_acc, _excluded) = macro_accuracy(pred, truth, num_classes, &permutation)?;
    let aligned = align_relations(learned, &permutation)?;
    let ged = relations::graph_edit_distance(&aligned, reference)?;
    Ok(MetricsReport {
        accuracy,
        ari,
        macro_accuracy: macro_acc,
        ged,
        matched_permutation: permutation,
    })
}

/// Re-indexes the learned relation's fine classes into ground-truth label
/// space: `aligned[perm[i]] = learned[i]`.
pub fn align_relations(
    learned: &RelationMatrix,
    permutation: &[usize],
) -> Result<RelationMatrix> {
    if permutation.len() != learned.num_fine() {
        return Err(Error::DimensionMismatch(format!(
            "permutation has {} entries, relation has {} fine classes",
            permutation.len(),
            learned.num_fine()
        )));
    }
    let mut parents = vec![usize::MAX; learned.num_fine()];
    for (i, &target) in permutation.iter().enumerate() {
        if target >= parents.len() || parents[target] != usize::MAX {
            return Err(Error::InvalidConfig("permutation is not a bijection".into()));
        }
        parents[target] = learned.parent(i);
    }
    RelationMatrix::new(parents, learned.num_coarse())
}
