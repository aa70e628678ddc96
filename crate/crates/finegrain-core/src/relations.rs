//! Class-relation inference: the binary fine-to-coarse assignment matrix, the
//! cost matrix accumulated from predictions, the discrete objective, and two
//! solvers for it — exhaustive enumeration and an exact min-cost-flow
//! reduction. Also hosts the bipartite graph edit distance.
//!
//! The objective over assignments is
//! `-(1/N) * sum_i C[parent(i), i] + lambda_m * balance`, where `balance`
//! penalizes squared column-sum deviation from the perfectly balanced
//! assignment. Feasible assignments give every fine class exactly one coarse
//! parent and every coarse class at least one fine child.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::MinCostFlow;
use crate::matrix::DenseMatrix;

/// Default enumeration budget for the brute-force solver.
pub const DEFAULT_ENUMERATION_BUDGET: f64 = 1e7;

/// Binary `K_F x K_C` relation matrix stored as a parent vector, which makes
/// the unit row sums structural. Column coverage is validated on
/// construction, so a value of this type is always feasible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMatrix {
    parents: Vec<usize>,
    num_coarse: usize,
}

impl RelationMatrix {
    pub fn new(parents: Vec<usize>, num_coarse: usize) -> Result<Self> {
        if num_coarse == 0 || parents.is_empty() {
            return Err(Error::Infeasible("empty relation matrix".into()));
        }
        if parents.len() < num_coarse {
            return Err(Error::Infeasible(format!(
                "{} fine classes cannot cover {} coarse classes",
                parents.len(),
                num_coarse
            )));
        }
        let mut covered = vec![false; num_coarse];
        for &p in &parents {
            if p >= num_coarse {
                return Err(Error::LabelOutOfRange {
                    label: p,
                    bound: num_coarse,
                });
            }
            covered[p] = true;
        }
        if let Some(j) = covered.iter().position(|&c| !c) {
            return Err(Error::Infeasible(format!(
                "coarse class {j} has no fine classes"
            )));
        }
        Ok(Self {
            parents,
            num_coarse,
        })
    }

    pub fn num_fine(&self) -> usize {
        self.parents.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.num_coarse
    }

    /// Coarse parent of fine class `i`.
    pub fn parent(&self, i: usize) -> usize {
        self.parents[i]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    /// Number of fine classes assigned to each coarse class.
    pub fn column_sums(&self) -> Vec<usize> {
        let mut sums = vec![0usize; self.num_coarse];
        for &p in &self.parents {
            sums[p] += 1;
        }
        sums
    }

    /// Row sums are 1 by construction and every column sum is >= 1.
    pub fn is_feasible(&self) -> bool {
        self.column_sums().iter().all(|&s| s >= 1)
    }

    /// Dense `K_F x K_C` 0/1 matrix, for tests that cross-check against
    /// explicit matrix algebra.
    pub fn as_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.num_fine(), self.num_coarse);
        for (i, &p) in self.parents.iter().enumerate() {
            m.set(i, p, 1.0);
        }
        m
    }

    /// Random feasible assignment: a permutation guarantees coverage, the
    /// remaining fine classes draw uniform parents.
    pub fn random_feasible<R: Rng>(k_f: usize, k_c: usize, rng: &mut R) -> Result<Self> {
        if k_f < k_c {
            return Err(Error::Infeasible(format!("k_f {k_f} < k_c {k_c}")));
        }
        let mut parents: Vec<usize> = (0..k_f)
            .map(|i| {
                if i < k_c {
                    i
                } else {
                    rng.random_range(0..k_c)
                }
            })
            .collect();
        use rand::seq::SliceRandom;
        parents.shuffle(rng);
        Self::new(parents, k_c)
    }

    /// Text form: a `K_F K_C` header, then one coarse index per fine class.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.num_fine(), self.num_coarse);
        for &p in &self.parents {
            let _ = writeln!(s, "{p}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            detail: "empty relation file".into(),
        })?;
        let mut parts = header.split_whitespace();
        let parse_count = |tok: Option<&str>| -> Result<usize> {
            tok.and_then(|t| t.parse().ok()).ok_or(Error::Parse {
                line: 1,
                detail: "header must be `K_F K_C`".into(),
            })
        };
        let k_f = parse_count(parts.next())?;
        let k_c = parse_count(parts.next())?;
        let mut parents = Vec::with_capacity(k_f);
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let p: usize = line.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                detail: format!("expected a coarse index, got `{line}`"),
            })?;
            parents.push(p);
        }
        if parents.len() != k_f {
            return Err(Error::Parse {
                line: parents.len() + 1,
                detail: format!("expected {k_f} rows, got {}", parents.len()),
            });
        }
        Self::new(parents, k_c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

impl Serialize for RelationMatrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("RelationMatrix", 3)?;
        s.serialize_field("num_fine", &self.num_fine())?;
        s.serialize_field("num_coarse", &self.num_coarse)?;
        s.serialize_field("parents", &self.parents)?;
        s.end()
    }
}

/// `K_C x K_F` accumulation of predicted fine mass per coarse label, plus the
/// number of samples it was accumulated from.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub entries: DenseMatrix,
    pub sample_count: f64,
}

impl CostMatrix {
    pub fn num_coarse(&self) -> usize {
        self.entries.rows()
    }

    pub fn num_fine(&self) -> usize {
        self.entries.cols()
    }

    /// Random entries in `[0, 1)` with a unit sample count; used to seed the
    /// relation matrix before any predictions exist.
    pub fn random<R: Rng>(k_c: usize, k_f: usize, rng: &mut R) -> Self {
        let mut entries = DenseMatrix::zeros(k_c, k_f);
        for v in entries.data_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        Self {
            entries,
            sample_count: 1.0,
        }
    }

    /// CSV with one row per coarse class, full precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for j in 0..self.entries.rows() {
            let row: Vec<String> = self
                .entries
                .row(j)
                .iter()
                .map(|v| format!("{v:.16e}"))
                .collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    /// Parses a cost CSV. The sample count defaults to the total mass, which
    /// matches matrices accumulated from probability rows.
    pub fn from_csv(text: &str, sample_count: Option<f64>) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: idx + 1,
                        detail: format!("bad number `{tok}`"),
                    })
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        let entries = DenseMatrix::from_rows(&rows)?;
        let total: f64 = entries.data().iter().sum();
        Ok(Self {
            entries,
            sample_count: sample_count.unwrap_or(total),
        })
    }
}

/// `C = Y_oh^T P`: entry `(j, i)` sums the predicted probability of fine
/// class `i` over samples whose coarse label is `j`.
pub fn build_cost_matrix(
    probs: &DenseMatrix,
    coarse_labels: &[usize],
    num_coarse: usize,
) -> Result<CostMatrix> {
    if probs.rows() != coarse_labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            coarse_labels.len()
        )));
    }
    let mut entries = DenseMatrix::zeros(num_coarse, probs.cols());
    for (b, &y) in coarse_labels.iter().enumerate() {
        if y >= num_coarse {
            return Err(Error::LabelOutOfRange {
                label: y,
                bound: num_coarse,
            });
        }
        for (e, &p) in entries.row_mut(y).iter_mut().zip(probs.row(b)) {
            *e += p;
        }
    }
    Ok(CostMatrix {
        entries,
        sample_count: probs.rows() as f64,
    })
}

/// Linearized coarse objective `-(1/N) sum_i C[parent(i), i]`.
pub fn linear_objective(relation: &RelationMatrix, cost: &CostMatrix) -> Result<f64> {
    if relation.num_fine() != cost.num_fine() || relation.num_coarse() != cost.num_coarse() {
        return Err(Error::DimensionMismatch(format!(
            "relation {}x{} vs cost {}x{}",
            relation.num_fine(),
            relation.num_coarse(),
            cost.num_fine(),
            cost.num_coarse()
        )));
    }
    let sum: f64 = relation
        .parents()
        .iter()
        .enumerate()
        .map(|(i, &p)| cost.entries.get(p, i))
        .sum();
    Ok(-sum / cost.sample_count)
}

/// Balance penalty `(1/K_C) sum_j n_j^2 - K_F^2 / K_C^2`; zero exactly when
/// the column sums are equal, positive otherwise.
pub fn balance_penalty(relation: &RelationMatrix) -> f64 {
    let k_c = relation.num_coarse() as f64;
    let k_f = relation.num_fine() as f64;
    let sq: f64 = relation
        .column_sums()
        .iter()
        .map(|&n| (n * n) as f64)
        .sum();
    sq / k_c - (k_f * k_f) / (k_c * k_c)
}

/// The two objective terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationObjectiveValue {
    pub linear_term: f64,
    pub balance_term: f64,
    pub total: f64,
}

pub fn evaluate_objective(
    relation: &RelationMatrix,
    cost: &CostMatrix,
    lambda_m: f64,
) -> Result<RelationObjectiveValue> {
    let linear_term = linear_objective(relation, cost)?;
    let balance_term = balance_penalty(relation);
    Ok(RelationObjectiveValue {
        linear_term,
        balance_term,
        total: linear_term + lambda_m * balance_term,
    })
}

fn check_instance(cost: &CostMatrix, lambda_m: f64) -> Result<(usize, usize)> {
    let (k_c, k_f) = (cost.num_coarse(), cost.num_fine());
    if k_c == 0 || k_f == 0 {
        return Err(Error::Infeasible("empty cost matrix".into()));
    }
    if k_f < k_c {
        return Err(Error::Infeasible(format!(
            "{k_f} fine classes cannot cover {k_c} coarse classes"
        )));
    }
    if !(lambda_m >= 0.0 && lambda_m.is_finite()) {
        return Err(Error::InvalidConfig("lambda_m must be >= 0".into()));
    }
    if !(cost.sample_count > 0.0 && cost.sample_count.is_finite()) {
        return Err(Error::InvalidConfig("sample count must be positive".into()));
    }
    Ok((k_c, k_f))
}

/// Global minimizer by exhaustive enumeration of all `K_C^{K_F}` parent
/// vectors, visited in lexicographic order so ties resolve to the smallest
/// assignment vector. Refuses instances beyond the state budget.
pub fn solve_relations_bruteforce(
    cost: &CostMatrix,
    lambda_m: f64,
    budget: f64,
) -> Result<(RelationMatrix, RelationObjectiveValue)> {
    let (k_c, k_f) = check_instance(cost, lambda_m)?;
    let states = (k_c as f64).powi(k_f as i32);
    if states > budget {
        return Err(Error::BudgetExceeded { states, budget });
    }
    let n = cost.sample_count;
    let lam = lambda_m / k_c as f64;
    let mut parents = vec![0usize; k_f];
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let mut counts = vec![0usize; k_c];
        let mut linear = 0.0;
        for (i, &p) in parents.iter().enumerate() {
            counts[p] += 1;
            linear += cost.entries.get(p, i);
        }
        if counts.iter().all(|&c| c >= 1) {
            let sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
            let total = -linear / n + lam * sq;
            if best.as_ref().is_none_or(|(_, b)| total < *b) {
                best = Some((parents.clone(), total));
            }
        }
        // lexicographic odometer
        let mut pos = k_f;
        while pos > 0 {
            pos -= 1;
            parents[pos] += 1;
            if parents[pos] < k_c {
                break;
            }
            parents[pos] = 0;
            if pos == 0 {
                let (parents, _) = best.expect("k_f >= k_c guarantees a feasible state");
                let relation = RelationMatrix::new(parents, k_c)?;
                let objective = evaluate_objective(&relation, cost, lambda_m)?;
                return Ok((relation, objective));
            }
        }
    }
}

/// Exact global minimizer via a min-cost-flow reduction.
///
/// Each fine class ships one unit to its coarse parent. The quadratic column
/// penalty is separable and convex, so it expands into parallel unit arcs
/// with increasing marginal costs `(lambda_m / K_C) * (2n - 1)`, and the
/// "every coarse class covered" lower bound becomes a unit demand at each
/// coarse node. Linear costs are shifted to be nonnegative (a constant per
/// feasible assignment), which keeps Dijkstra applicable.
pub fn solve_relations_exact(
    cost: &CostMatrix,
    lambda_m: f64,
) -> Result<(RelationMatrix, RelationObjectiveValue)> {
    let (k_c, k_f) = check_instance(cost, lambda_m)?;
    let n = cost.sample_count;
    let shift = cost
        .entries
        .data()
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v / n));

    // node layout: source | fine 0.. | coarse 0.. | overflow | sink
    let source = 0usize;
    let fine0 = 1usize;
    let coarse0 = fine0 + k_f;
    let overflow = coarse0 + k_c;
    let sink = overflow + 1;
    let mut mcf = MinCostFlow::new(sink + 1);

    for i in 0..k_f {
        mcf.add_edge(source, fine0 + i, 1, 0.0);
    }
    let mut assign_edges = vec![vec![0usize; k_c]; k_f];
    for (i, edges) in assign_edges.iter_mut().enumerate() {
        for (j, slot) in edges.iter_mut().enumerate() {
            let w = shift - cost.entries.get(j, i) / n;
            *slot = mcf.add_edge(fine0 + i, coarse0 + j, 1, w.max(0.0));
        }
    }
    let lam = lambda_m / k_c as f64;
    for j in 0..k_c {
        // the mandatory first unit per coarse class
        mcf.add_edge(coarse0 + j, sink, 1, 0.0);
        // marginal cost of the n-th unit beyond the first
        for unit in 2..=(k_f - k_c + 1) {
            mcf.add_edge(coarse0 + j, overflow, 1, lam * (2 * unit - 1) as f64);
        }
    }
    if k_f > k_c {
        mcf.add_edge(overflow, sink, (k_f - k_c) as i64, 0.0);
    }

    let (flow, _) = mcf.solve(source, sink, k_f as i64);
    debug_assert_eq!(flow, k_f as i64, "complete bipartite instance is feasible");

    let mut parents = vec![usize::MAX; k_f];
    for (i, edges) in assign_edges.iter().enumerate() {
        for (j, &eid) in edges.iter().enumerate() {
            if mcf.flow_on(eid) == 1 {
                parents[i] = j;
            }
        }
    }
    let relation = RelationMatrix::new(parents, k_c)?;
    let objective = evaluate_objective(&relation, cost, lambda_m)?;
    Ok((relation, objective))
}

/// Edit distance between two relation graphs over identical node sets: twice
/// the number of fine classes whose parent differs (one edge removed, one
/// added each).
pub fn graph_edit_distance(a: &RelationMatrix, b: &RelationMatrix) -> Result<usize> {
    if a.num_fine() != b.num_fine() || a.num_coarse() != b.num_coarse() {
        return Err(Error::DimensionMismatch(format!(
            "relation shapes differ: {}x{} vs {}x{}",
            a.num_fine(),
            a.num_coarse(),
            b.num_fine(),
            b.num_coarse()
        )));
    }
    let moved = a
        .parents()
        .iter()
        .zip(b.parents())
        .filter(|(x, y)| x != y)
        .count();
    Ok(2 * moved)
}
