//! Synthetic hierarchical datasets and CSV ingestion.
//!
//! Samples are isotropic unit-variance Gaussians, one component per fine
//! class. Coarse-class centers sit on random directions scaled by
//! `separation`; fine centers add a `within_separation`-scaled offset around
//! their coarse center, so the coarse structure is easy and the fine
//! structure is controllably subtle.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Feature rows with coarse labels; fine labels ride along for evaluation
/// only. `dataset_index` tags the source dataset in multi-dataset training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: DenseMatrix,
    pub coarse_labels: Vec<usize>,
    pub fine_labels: Option<Vec<usize>>,
    pub num_coarse: usize,
    pub num_fine: Option<usize>,
    pub dataset_index: usize,
}

impl Dataset {
    pub fn new(
        features: DenseMatrix,
        coarse_labels: Vec<usize>,
        fine_labels: Option<Vec<usize>>,
        num_coarse: usize,
        num_fine: Option<usize>,
    ) -> Result<Self> {
        if features.rows() != coarse_labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} coarse labels",
                features.rows(),
                coarse_labels.len()
            )));
        }
        if let Some(&bad) = coarse_labels.iter().find(|&&y| y >= num_coarse) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                bound: num_coarse,
            });
        }
        if let Some(fine) = &fine_labels {
            if fine.len() != coarse_labels.len() {
                return Err(Error::DimensionMismatch(
                    "fine label count differs from sample count".into(),
                ));
            }
            if let Some(k_f) = num_fine
                && let Some(&bad) = fine.iter().find(|&&y| y >= k_f)
            {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    bound: k_f,
                });
            }
            // single-parent check: a fine class never spans two coarse classes
            let k_f = num_fine.unwrap_or_else(|| fine.iter().max().map_or(0, |&m| m + 1));
            let mut parent = vec![usize::MAX; k_f];
            for (&f, &c) in fine.iter().zip(&coarse_labels) {
                if parent[f] == usize::MAX {
                    parent[f] = c;
                } else if parent[f] != c {
                    return Err(Error::InvalidConfig(format!(
                        "fine class {f} appears under coarse classes {} and {c}",
                        parent[f]
                    )));
                }
            }
        }
        Ok(Self {
            features,
            coarse_labels,
            fine_labels,
            num_coarse,
            num_fine,
            dataset_index: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.coarse_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coarse_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Splits into two halves by row order (first half, second half).
    pub fn split_half(&self) -> (Dataset, Dataset) {
        let mid = self.len() / 2;
        (self.subset(0..mid), self.subset(mid..self.len()))
    }

    fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        let indices: Vec<usize> = range.collect();
        Dataset {
            features: self.features.select_rows(&indices),
            coarse_labels: indices.iter().map(|&i| self.coarse_labels[i]).collect(),
            fine_labels: self
                .fine_labels
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i]).collect()),
            num_coarse: self.num_coarse,
            num_fine: self.num_fine,
            dataset_index: self.dataset_index,
        }
    }
}

/// Describes a taxonomy over fine classes plus the geometry and imbalance of
/// the generated mixture.
#[derive(Debug, Clone)]
pub struct TaxonomySpec {
    pub num_coarse: usize,
    pub num_fine: usize,
    /// Coarse parent per fine class; must cover every coarse class.
    pub assignment: Vec<usize>,
    /// Relative sampling weight per fine class; `None` means uniform.
    pub class_weights: Option<Vec<f64>>,
    /// Distance scale between coarse-class centers.
    pub separation: f64,
    /// Distance scale between fine centers within a coarse class.
    pub within_separation: f64,
}

impl TaxonomySpec {
    /// Round-robin blocks: fine class `i` belongs to coarse `i * K_C / K_F`,
    /// giving near-equal block sizes.
    pub fn balanced(num_coarse: usize, num_fine: usize, separation: f64, within: f64) -> Self {
        let assignment = (0..num_fine).map(|i| i * num_coarse / num_fine).collect();
        Self {
            num_coarse,
            num_fine,
            assignment,
            class_weights: None,
            separation,
            within_separation: within,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_coarse == 0 || self.num_fine < self.num_coarse {
            return Err(Error::InvalidConfig(format!(
                "need num_fine >= num_coarse >= 1, got {} and {}",
                self.num_fine, self.num_coarse
            )));
        }
        if self.assignment.len() != self.num_fine {
            return Err(Error::InvalidConfig(
                "assignment length differs from num_fine".into(),
            ));
        }
        let mut covered = vec![false; self.num_coarse];
        for &c in &self.assignment {
            if c >= self.num_coarse {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    bound: self.num_coarse,
                });
            }
            covered[c] = true;
        }
        if covered.iter().any(|&c| !c) {
            return Err(Error::InvalidConfig(
                "assignment must cover every coarse class".into(),
            ));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.num_fine {
                return Err(Error::InvalidConfig(
                    "class_weights length differs from num_fine".into(),
                ));
            }
            if w.iter().any(|&x| x.is_nan() || x <= 0.0 || !x.is_finite()) {
                return Err(Error::InvalidConfig(
                    "class_weights must be positive and finite".into(),
                ));
            }
        }
        if self.separation.is_nan()
            || self.separation < 0.0
            || self.within_separation.is_nan()
            || self.within_separation < 0.0
        {
            return Err(Error::InvalidConfig("separations must be >= 0".into()));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` samples over normalized weights;
/// uniform weights land within one sample of each other, and any profile is
/// reproduced exactly up to rounding.
pub fn apportion_counts(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let ideal: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|&x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // largest fractional part first, index breaks ties
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

fn random_unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a hierarchical Gaussian mixture. Deterministic per seed; sample
/// order is shuffled so prefixes are unbiased.
pub fn generate(spec: &TaxonomySpec, n: usize, dim: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n < spec.num_fine {
        return Err(Error::InvalidConfig(format!(
            "need at least one sample per fine class: n = {n} < {}",
            spec.num_fine
        )));
    }
    if dim < 2 {
        return Err(Error::InvalidConfig("dim must be >= 2".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let coarse_centers: Vec<Vec<f64>> = (0..spec.num_coarse)
        .map(|_| {
            random_unit_vector(dim, &mut rng)
                .into_iter()
                .map(|x| x * spec.separation)
                .collect()
        })
        .collect();
    let fine_centers: Vec<Vec<f64>> = (0..spec.num_fine)
        .map(|f| {
            let base = &coarse_centers[spec.assignment[f]];
            random_unit_vector(dim, &mut rng)
                .into_iter()
                .zip(base)
                .map(|(u, &b)| b + u * spec.within_separation)
                .collect()
        })
        .collect();

    let uniform = vec![1.0; spec.num_fine];
    let weights = spec.class_weights.as_deref().unwrap_or(&uniform);
    let counts = apportion_counts(weights, n);

    let mut features = DenseMatrix::zeros(n, dim);
    let mut fine_labels = Vec::with_capacity(n);
    let mut row = 0usize;
    for (f, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let dst = features.row_mut(row);
            for (x, &c) in dst.iter_mut().zip(&fine_centers[f]) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = c + z;
            }
            fine_labels.push(f);
            row += 1;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let features = features.select_rows(&order);
    let fine_labels: Vec<usize> = order.iter().map(|&i| fine_labels[i]).collect();
    let coarse_labels: Vec<usize> = fine_labels.iter().map(|&f| spec.assignment[f]).collect();

    Dataset::new(
        features,
        coarse_labels,
        Some(fine_labels),
        spec.num_coarse,
        Some(spec.num_fine),
    )
}

/// Remaps coarse labels under an alternative taxonomy over the same fine
/// classes. Features and fine labels are untouched.
pub fn relabel(dataset: &Dataset, alternative: &TaxonomySpec) -> Result<Dataset> {
    alternative.validate()?;
    let fine = dataset.fine_labels.as_ref().ok_or_else(|| {
        Error::InvalidConfig("relabel requires fine labels on the dataset".into())
    })?;
    let mut coarse = Vec::with_capacity(fine.len());
    for &f in fine {
        let c = alternative
            .assignment
            .get(f)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!(
                "fine class {f} missing from the alternative assignment"
            )))?;
        coarse.push(c);
    }
    let mut out = Dataset::new(
        dataset.features.clone(),
        coarse,
        Some(fine.clone()),
        alternative.num_coarse,
        Some(alternative.num_fine),
    )?;
    out.dataset_index = dataset.dataset_index;
    Ok(out)
}

/// CSV header: `f0,..,f{dim-1},coarse[,fine]`. Values are written with 17
/// significant digits so the round trip is exact.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let dim = dataset.dim();
    let mut out = String::new();
    for i in 0..dim {
        let _ = write!(out, "f{i},");
    }
    out.push_str("coarse");
    if dataset.fine_labels.is_some() {
        out.push_str(",fine");
    }
    out.push('\n');
    for r in 0..dataset.len() {
        for v in dataset.features.row(r) {
            let _ = write!(out, "{v:.16e},");
        }
        let _ = write!(out, "{}", dataset.coarse_labels[r]);
        if let Some(fine) = &dataset.fine_labels {
            let _ = write!(out, ",{}", fine[r]);
        }
        out.push('\n');
    }
    Ok(std::fs::write(path, out)?)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        detail: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_fine = columns.last() == Some(&"fine");
    let coarse_pos = columns.len() - if has_fine { 2 } else { 1 };
    if columns.get(coarse_pos) != Some(&"coarse") {
        return Err(Error::Parse {
            line: 1,
            detail: "header must end in `coarse[,fine]`".into(),
        });
    }
    let dim = coarse_pos;
    for (i, col) in columns.iter().take(dim).enumerate() {
        if *col != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                detail: format!("expected column `f{i}`, got `{col}`"),
            });
        }
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    let mut count = 0usize;
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Parse {
                line: idx + 1,
                detail: format!("expected {} fields, got {}", columns.len(), fields.len()),
            });
        }
        for (c, tok) in fields.iter().take(dim).enumerate() {
            let v: f64 = tok.trim().parse().map_err(|_| Error::Parse {
                line: idx + 1,
                detail: format!("column f{c}: bad number `{tok}`"),
            })?;
            rows.push(v);
        }
        let y: usize = fields[dim].trim().parse().map_err(|_| Error::Parse {
            line: idx + 1,
            detail: format!("bad coarse label `{}`", fields[dim]),
        })?;
        coarse.push(y);
        if has_fine {
            let f: usize = fields[dim + 1].trim().parse().map_err(|_| Error::Parse {
                line: idx + 1,
                detail: format!("bad fine label `{}`", fields[dim + 1]),
            })?;
            fine.push(f);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Parse {
            line: 1,
            detail: "no data rows".into(),
        });
    }
    let features = DenseMatrix::from_vec(count, dim, rows)?;
    let num_coarse = coarse.iter().max().map_or(0, |&m| m + 1);
    let (fine_labels, num_fine) = if has_fine {
        let k_f = fine.iter().max().map_or(0, |&m| m + 1);
        (Some(fine), Some(k_f))
    } else {
        (None, None)
    };
    Dataset::new(features, coarse, fine_labels, num_coarse, num_fine)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_4x2() -> TaxonomySpec {
        TaxonomySpec::balanced(2, 4, 20.0, 6.0)
    }

    #[test]
    fn uniform_weights_balance_counts_within_one() {
        let counts = apportion_counts(&[1.0; 7], 45);
        let min = counts.iter().min().unwrap();
        let max = counts.iter().max().unwrap();
        assert!(max - min <= 1);
        assert_eq!(counts.iter().sum::<usize>(), 45);
    }

    #[test]
    fn skewed_weights_match_requested_histogram() {
        // largest-remainder apportionment reproduces the profile exactly up
        // to one sample per class, far inside multinomial noise
        let weights = [8.0, 4.0, 2.0, 1.0, 1.0];
        let n = 1600;
        let counts = apportion_counts(&weights, n);
        let total: f64 = weights.iter().sum();
        for (c, w) in counts.iter().zip(&weights) {
            let ideal = w / total * n as f64;
            assert!((*c as f64 - ideal).abs() <= 1.0, "{c} vs {ideal}");
        }
        let spec = TaxonomySpec {
            class_weights: Some(weights.to_vec()),
            ..TaxonomySpec::balanced(2, 5, 20.0, 6.0)
        };
        let data = generate(&spec, n, 4, 3).unwrap();
        let mut hist = vec![0usize; 5];
        for &f in data.fine_labels.as_ref().unwrap() {
            hist[f] += 1;
        }
        assert_eq!(hist, counts);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = spec_4x2();
        let a = generate(&spec, 64, 3, 11).unwrap();
        let b = generate(&spec, 64, 3, 11).unwrap();
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.coarse_labels, b.coarse_labels);
        let c = generate(&spec, 64, 3, 12).unwrap();
        assert_ne!(a.features.data(), c.features.data());
    }

    #[test]
    fn generated_labels_respect_single_parent_assumption() {
        let spec = spec_4x2();
        let data = generate(&spec, 50, 4, 5).unwrap();
        for (f, c) in data
            .fine_labels
            .as_ref()
            .unwrap()
            .iter()
            .zip(&data.coarse_labels)
        {
            assert_eq!(spec.assignment[*f], *c);
        }
    }

    #[test]
    fn large_separation_makes_fine_classes_nearest_neighbor_separable() {
        let spec = TaxonomySpec::balanced(3, 6, 400.0, 120.0);
        let data = generate(&spec, 120, 8, 9).unwrap();
        let fine = data.fine_labels.as_ref().unwrap();
        // leave-one-out 1-NN on raw features
        let mut correct = 0usize;
        for i in 0..data.len() {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for j in 0..data.len() {
                if i == j {
                    continue;
                }
                let d: f64 = data
                    .features
                    .row(i)
                    .iter()
                    .zip(data.features.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if fine[best] == fine[i] {
                correct += 1;
            }
        }
        assert_eq!(correct, data.len());
    }

    #[test]
    fn relabel_identity_returns_equal_dataset() {
        let spec = spec_4x2();
        let data = generate(&spec, 40, 3, 2).unwrap();
        let back = relabel(&data, &spec).unwrap();
        assert_eq!(back.features.data(), data.features.data());
        assert_eq!(back.coarse_labels, data.coarse_labels);
        assert_eq!(back.fine_labels, data.fine_labels);
    }

    #[test]
    fn relabel_merge_reduces_coarse_count() {
        let spec = spec_4x2();
        let data = generate(&spec, 40, 3, 2).unwrap();
        let merged = TaxonomySpec {
            num_coarse: 1,
            assignment: vec![0; 4],
            ..spec.clone()
        };
        let out = relabel(&data, &merged).unwrap();
        assert_eq!(out.num_coarse, 1);
        assert!(out.coarse_labels.iter().all(|&c| c == 0));
        assert_eq!(out.features.data(), data.features.data());
    }

    #[test]
    fn relabel_rejects_missing_fine_class() {
        let spec = spec_4x2();
        let data = generate(&spec, 40, 3, 2).unwrap();
        let short = TaxonomySpec {
            num_fine: 3,
            assignment: vec![0, 0, 1],
            ..spec
        };
        assert!(relabel(&data, &short).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let data = generate(&spec_4x2(), 32, 3, 7).unwrap();
        save_csv(&data, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.features.data(), data.features.data());
        assert_eq!(back.coarse_labels, data.coarse_labels);
        assert_eq!(back.fine_labels, data.fine_labels);

        // byte-identical emission for equal seeds
        let path2 = dir.path().join("data2.csv");
        save_csv(&generate(&spec_4x2(), 32, 3, 7).unwrap(), &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn csv_without_fine_column_loads_none() {
        let text = "f0,f1,coarse\n1.0,2.0,0\n3.0,4.0,1\n";
        let data = parse_csv(text).unwrap();
        assert!(data.fine_labels.is_none());
        assert_eq!(data.num_coarse, 2);
    }

    #[test]
    fn csv_reports_bad_cell_with_location() {
        let text = "f0,f1,coarse\n1.0,oops,0\n";
        match parse_csv(text) {
            Err(Error::Parse { line, detail }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("f1"), "{detail}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_rejects_fine_class_spanning_two_coarse_classes() {
        let features = DenseMatrix::zeros(2, 2);
        let err = Dataset::new(features, vec![0, 1], Some(vec![0, 0]), 2, Some(1));
        assert!(err.is_err());
    }
}
