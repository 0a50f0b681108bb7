//! Count tables: parsing, genus-level aggregation and cross-study
//! harmonization with a near-zero-variance filter.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// n×p nonnegative integer observations for one study.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    samples: Vec<String>,
    features: Vec<String>,
    counts: DMatrix<u64>,
    study_label: String,
}

impl CountMatrix {
    pub fn new(
        samples: Vec<String>,
        features: Vec<String>,
        counts: DMatrix<u64>,
        study_label: impl Into<String>,
    ) -> Result<Self> {
        if counts.nrows() != samples.len() || counts.ncols() != features.len() {
            return Err(Error::Schema(format!(
                "counts are {}x{} but there are {} samples and {} features",
                counts.nrows(),
                counts.ncols(),
                samples.len(),
                features.len()
            )));
        }
        check_unique("sample", &samples)?;
        check_unique("feature", &features)?;
        Ok(CountMatrix {
            samples,
            features,
            counts,
            study_label: study_label.into(),
        })
    }

    /// Builds a matrix with generated identifiers `s{i}` / `f{j}`.
    pub fn from_counts(counts: DMatrix<u64>, study_label: impl Into<String>) -> Self {
        let samples = (0..counts.nrows()).map(|i| format!("s{i}")).collect();
        let features = (0..counts.ncols()).map(|j| format!("f{j}")).collect();
        CountMatrix {
            samples,
            features,
            counts,
            study_label: study_label.into(),
        }
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn counts(&self) -> &DMatrix<u64> {
        &self.counts
    }

    pub fn study_label(&self) -> &str {
        &self.study_label
    }

    pub fn n_samples(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.counts.ncols()
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.counts.map(|c| c as f64)
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.row_iter().map(|r| r.iter().sum()).collect()
    }

    /// Subset and reorder columns by feature name.
    pub fn select_features(&self, names: &[String]) -> Result<CountMatrix> {
        let index: HashMap<&str, usize> = self
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| (f.as_str(), j))
            .collect();
        let mut cols = Vec::with_capacity(names.len());
        for name in names {
            match index.get(name.as_str()) {
                Some(&j) => cols.push(j),
                None => {
                    return Err(Error::Schema(format!(
                        "study `{}` has no feature `{name}`",
                        self.study_label
                    )))
                }
            }
        }
        let counts = DMatrix::from_fn(self.n_samples(), cols.len(), |i, k| self.counts[(i, cols[k])]);
        CountMatrix::new(self.samples.clone(), names.to_vec(), counts, self.study_label.clone())
    }

    /// Vertical concatenation; all inputs must share the feature vector.
    pub fn concat(parts: &[CountMatrix], label: impl Into<String>) -> Result<CountMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to concatenate".into()))?;
        let p = first.n_features();
        let mut samples = Vec::new();
        let mut rows = Vec::new();
        for part in parts {
            if part.features != first.features {
                return Err(Error::Schema("feature vectors differ across studies".into()));
            }
            for (i, s) in part.samples.iter().enumerate() {
                samples.push(format!("{}:{s}", part.study_label));
                rows.push(part.counts.row(i).iter().copied().collect::<Vec<_>>());
            }
        }
        let counts = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        CountMatrix::new(samples, first.features.clone(), counts, label)
    }
}

fn check_unique(kind: &str, ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Schema(format!("duplicate {kind} identifier `{id}`")));
        }
    }
    Ok(())
}

/// Feature identifier → group identifier (e.g. strain → genus).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureMap {
    entries: BTreeMap<String, String>,
}

impl FeatureMap {
    pub fn new<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        FeatureMap {
            entries: pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    pub fn get(&self, feature: &str) -> Option<&str> {
        self.entries.get(feature).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Two-column TSV (feature, group). A header line `feature\tgroup` is
    /// skipped if present.
    pub fn read(path: &Path) -> Result<FeatureMap> {
        let text = fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != 2 {
                return Err(Error::Parse {
                    row: line_no + 1,
                    column: cells.len(),
                    detail: "expected two tab-separated columns".into(),
                });
            }
            if line_no == 0 && cells[0] == "feature" && cells[1] == "group" {
                continue;
            }
            if entries
                .insert(cells[0].to_string(), cells[1].to_string())
                .is_some()
            {
                return Err(Error::Schema(format!("feature `{}` mapped twice", cells[0])));
            }
        }
        Ok(FeatureMap { entries })
    }
}

/// Parse a TSV count table: header row of feature identifiers (first cell is
/// a label for the sample column), first column sample identifiers.
pub fn read_counts(path: &Path, study_label: &str) -> Result<CountMatrix> {
    let text = fs::read_to_string(path)?;
    parse_counts(&text, study_label)
}

pub fn parse_counts(text: &str, study_label: &str) -> Result<CountMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema("empty count table".into()))?;
    let features: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
    if features.is_empty() {
        return Err(Error::Schema("header has no feature columns".into()));
    }
    let mut samples = Vec::new();
    let mut values = Vec::new();
    for (line_no, line) in lines {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != features.len() + 1 {
            return Err(Error::Parse {
                row: line_no + 1,
                column: cells.len(),
                detail: format!("expected {} cells, found {}", features.len() + 1, cells.len()),
            });
        }
        samples.push(cells[0].to_string());
        for (j, cell) in cells[1..].iter().enumerate() {
            let v: u64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: line_no + 1,
                column: j + 2,
                detail: format!("`{cell}` is not a nonnegative integer"),
            })?;
            values.push(v);
        }
    }
    let counts = DMatrix::from_row_slice(samples.len(), features.len(), &values);
    CountMatrix::new(samples, features, counts, study_label)
}

pub fn format_counts(x: &CountMatrix) -> String {
    let mut out = String::from("sample");
    for f in x.features() {
        out.push('\t');
        out.push_str(f);
    }
    out.push('\n');
    for (i, s) in x.samples().iter().enumerate() {
        out.push_str(s);
        for j in 0..x.n_features() {
            let _ = write!(out, "\t{}", x.counts[(i, j)]);
        }
        out.push('\n');
    }
    out
}

pub fn write_counts(path: &Path, x: &CountMatrix) -> Result<()> {
    fs::write(path, format_counts(x))?;
    Ok(())
}

/// Sum columns that map to the same group. Output columns are sorted by
/// group identifier.
pub fn aggregate(x: &CountMatrix, map: &FeatureMap) -> Result<CountMatrix> {
    let missing: Vec<String> = x
        .features()
        .iter()
        .filter(|f| map.get(f).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, f) in x.features().iter().enumerate() {
        groups.entry(map.get(f).unwrap()).or_default().push(j);
    }
    let names: Vec<String> = groups.keys().map(|g| g.to_string()).collect();
    let members: Vec<&Vec<usize>> = groups.values().collect();
    let counts = DMatrix::from_fn(x.n_samples(), names.len(), |i, k| {
        members[k].iter().map(|&j| x.counts[(i, j)]).sum()
    });
    CountMatrix::new(x.samples().to_vec(), names, counts, x.study_label())
}

/// Near-zero-variance rule: flagged when the ratio of the most common value's
/// frequency to the second most common exceeds `freq_ratio` and the fraction
/// of distinct values is below `unique_fraction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NzvRule {
    pub freq_ratio: f64,
    pub unique_fraction: f64,
}

impl Default for NzvRule {
    fn default() -> Self {
        NzvRule {
            freq_ratio: 19.0,
            unique_fraction: 0.10,
        }
    }
}

impl NzvRule {
    pub fn is_near_zero_variance(&self, column: &[u64]) -> bool {
        if column.is_empty() {
            return true;
        }
        let mut freq: HashMap<u64, usize> = HashMap::new();
        for &v in column {
            *freq.entry(v).or_default() += 1;
        }
        if freq.len() == 1 {
            return true;
        }
        let mut counts: Vec<usize> = freq.values().copied().collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let ratio = if counts.len() < 2 {
            f64::INFINITY
        } else {
            counts[0] as f64 / counts[1] as f64
        };
        let unique = freq.len() as f64 / column.len() as f64;
        ratio > self.freq_ratio && unique < self.unique_fraction
    }
}

/// Restrict every study to the shared features, drop near-zero-variance
/// features of the pooled data, and order features identically.
pub fn harmonize(xs: &[CountMatrix], rule: NzvRule) -> Result<Vec<CountMatrix>> {
    if xs.len() < 2 {
        return Err(Error::Harmonize(format!(
            "need at least two studies, got {}",
            xs.len()
        )));
    }
    let mut common: Vec<String> = xs[0].features().to_vec();
    for x in &xs[1..] {
        let set: HashSet<&str> = x.features().iter().map(String::as_str).collect();
        common.retain(|f| set.contains(f.as_str()));
    }
    common.sort();
    if common.is_empty() {
        return Err(Error::Harmonize("studies share no features".into()));
    }
    let subset: Vec<CountMatrix> = xs
        .iter()
        .map(|x| x.select_features(&common))
        .collect::<Result<_>>()?;
    let keep: Vec<String> = common
        .iter()
        .enumerate()
        .filter(|(j, _)| {
            let pooled: Vec<u64> = subset
                .iter()
                .flat_map(|x| x.counts.column(*j).iter().copied().collect::<Vec<_>>())
                .collect();
            !rule.is_near_zero_variance(&pooled)
        })
        .map(|(_, f)| f.clone())
        .collect();
    if keep.is_empty() {
        return Err(Error::Harmonize(
            "every shared feature was removed by the near-zero-variance filter".into(),
        ));
    }
    subset.iter().map(|x| x.select_features(&keep)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[u64]], features: &[&str], label: &str) -> CountMatrix {
        let n = rows.len();
        let p = rows[0].len();
        let counts = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        CountMatrix::new(
            (0..n).map(|i| format!("{label}{i}")).collect(),
            features.iter().map(|s| s.to_string()).collect(),
            counts,
            label,
        )
        .unwrap()
    }

    #[test]
    fn parse_small_table() {
        let x = parse_counts("sample\ta\tb\ns1\t1\t2\ns2\t3\t4\n", "st").unwrap();
        assert_eq!(x.features(), ["a", "b"]);
        assert_eq!(x.samples(), ["s1", "s2"]);
        assert_eq!(x.counts()[(1, 0)], 3);
    }

    #[test]
    fn negative_value_is_parse_error() {
        let err = parse_counts("sample\ta\tb\ns1\t1\t-2\n", "st").unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!((row, column), (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_schema_errors() {
        assert!(matches!(
            parse_counts("sample\ta\ta\ns1\t1\t2\n", "st"),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            parse_counts("sample\ta\ns1\t1\ns1\t2\n", "st"),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn round_trip_text() {
        let x = m(&[&[0, 5, 9], &[7, 1, 2]], &["x", "y", "z"], "a");
        let back = parse_counts(&format_counts(&x), "a").unwrap();
        assert_eq!(back.counts(), x.counts());
        assert_eq!(back.features(), x.features());
    }

    #[test]
    fn aggregate_sums_strains() {
        let x = m(&[&[3, 4, 1]], &["s1", "s2", "t1"], "a");
        let map = FeatureMap::new([("s1", "GenusB"), ("s2", "GenusB"), ("t1", "GenusA")]);
        let g = aggregate(&x, &map).unwrap();
        assert_eq!(g.features(), ["GenusA", "GenusB"]);
        assert_eq!(g.counts()[(0, 1)], 7);
        assert_eq!(g.counts()[(0, 0)], 1);
    }

    #[test]
    fn aggregate_identity_map_reorders_only() {
        let x = m(&[&[3, 4], &[5, 6]], &["b", "a"], "a");
        let map = FeatureMap::new([("a", "a"), ("b", "b")]);
        let g = aggregate(&x, &map).unwrap();
        assert_eq!(g.features(), ["a", "b"]);
        assert_eq!(g.counts()[(1, 0)], 6);
    }

    #[test]
    fn aggregate_reports_unmapped() {
        let x = m(&[&[3, 4]], &["b", "a"], "a");
        let map = FeatureMap::new([("a", "g")]);
        match aggregate(&x, &map) {
            Err(Error::Coverage(missing)) => assert_eq!(missing, vec!["b".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn harmonize_disjoint_fails() {
        let a = m(&[&[1, 2]], &["a", "b"], "a");
        let b = m(&[&[1, 2]], &["c", "d"], "b");
        assert!(matches!(harmonize(&[a, b], NzvRule::default()), Err(Error::Harmonize(_))));
    }

    #[test]
    fn harmonize_drops_zero_column() {
        let a = m(&[&[1, 0, 5], &[2, 0, 8], &[3, 0, 1]], &["a", "z", "b"], "a");
        let b = m(&[&[4, 0, 2], &[9, 0, 3]], &["b", "z", "a"], "b");
        let out = harmonize(&[a, b], NzvRule::default()).unwrap();
        assert_eq!(out[0].features(), ["a", "b"]);
        assert_eq!(out[1].features(), ["a", "b"]);
        assert_eq!(out[1].counts()[(0, 0)], 2);
    }

    #[test]
    fn nzv_rule_thresholds() {
        let rule = NzvRule::default();
        let mut col = vec![0u64; 40];
        col[0] = 1;
        assert!(rule.is_near_zero_variance(&col));
        let spread: Vec<u64> = (0..40).collect();
        assert!(!rule.is_near_zero_variance(&spread));
    }
}
