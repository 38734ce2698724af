//! Datasets, loaders and horizontal partitions.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::keystream::Seed;

use super::LearnerError;

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Self, LearnerError> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(LearnerError::Data(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(LearnerError::Data(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.x(i));
        }
        Self {
            dim: self.dim,
            classes: self.classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Applies `f` to every row, e.g. a frozen feature map.
    pub fn map_rows(&self, f: impl Fn(&[f64]) -> Vec<f64> + Sync) -> Self {
        use rayon::prelude::*;
        let rows: Vec<Vec<f64>> = (0..self.len()).into_par_iter().map(|i| f(self.x(i))).collect();
        let dim = rows.first().map_or(self.dim, Vec::len);
        Self {
            dim,
            classes: self.classes,
            features: rows.concat(),
            labels: self.labels.clone(),
        }
    }

    /// Random split into `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: &Seed) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed.rng());
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test);
        (self.subset(train), self.subset(test))
    }

    /// Per-feature mean and standard deviation.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len().max(1) as f64;
        let mut mean = vec![0.0; self.dim];
        for row in self.features.chunks_exact(self.dim) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; self.dim];
        for row in self.features.chunks_exact(self.dim) {
            var.iter_mut()
                .zip(row)
                .zip(&mean)
                .for_each(|((v, x), m)| *v += (x - m).powi(2) / n);
        }
        (mean, var.into_iter().map(f64::sqrt).collect())
    }

    pub fn standardize_with(&mut self, mean: &[f64], std: &[f64]) {
        for row in self.features.chunks_exact_mut(self.dim) {
            for ((x, m), s) in row.iter_mut().zip(mean).zip(std) {
                *x = if *s > 0.0 { (*x - m) / s } else { *x - m };
            }
        }
    }
}

/// Class means of norm `separation` in random directions plus unit
/// Gaussian noise; labels uniform.
pub fn gaussian_mixture(samples: usize, features: usize, classes: usize, separation: f64, seed: &Seed) -> Dataset {
    let mut rng = seed.rng();
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..features).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x * separation / norm).collect()
        })
        .collect();
    let mut xs = Vec::with_capacity(samples * features);
    let mut ys = Vec::with_capacity(samples);
    for _ in 0..samples {
        let c = rng.random_range(0..classes);
        xs.extend(means[c].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
        ys.push(c as u32);
    }
    Dataset::new(features, classes, xs, ys).expect("consistent by construction")
}

/// Two classes split by a random hyperplane through the origin, with no
/// point closer to it than `margin`.
pub fn linearly_separable(samples: usize, features: usize, margin: f64, seed: &Seed) -> Dataset {
    let mut rng = seed.rng();
    let w: Vec<f64> = (0..features).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut xs = Vec::with_capacity(samples * features);
    let mut ys = Vec::with_capacity(samples);
    while ys.len() < samples {
        let x: Vec<f64> = (0..features).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let side = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / norm;
        if side.abs() < margin {
            continue;
        }
        xs.extend(x);
        ys.push((side > 0.0) as u32);
    }
    Dataset::new(features, 2, xs, ys).expect("consistent by construction")
}

/// Numeric CSV with one integer label column (the last one by default).
/// A first line that does not parse as numbers is treated as a header.
pub fn load_csv(path: &Path, label_column: Option<usize>) -> Result<Dataset, LearnerError> {
    let text = fs::read_to_string(path).map_err(|e| LearnerError::Data(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if rows.is_empty() && line_no == 0 => continue,
            Err(e) => return Err(LearnerError::Data(format!("line {}: {e}", line_no + 1))),
        }
    }
    let width = rows.first().map_or(0, Vec::len);
    if width < 2 {
        return Err(LearnerError::Data("CSV needs at least one feature and a label".into()));
    }
    let label_col = label_column.unwrap_or(width - 1);
    if label_col >= width {
        return Err(LearnerError::Data(format!("label column {label_col} out of range")));
    }
    let mut features = Vec::with_capacity(rows.len() * (width - 1));
    let mut labels = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(LearnerError::Data(format!("row {} has {} fields, expected {width}", i + 1, row.len())));
        }
        let label = row[label_col];
        if label < 0.0 || label.fract() != 0.0 {
            return Err(LearnerError::Data(format!("row {}: label {label} is not a class index", i + 1)));
        }
        labels.push(label as u32);
        features.extend(row.iter().enumerate().filter(|(j, _)| *j != label_col).map(|(_, v)| *v));
    }
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1).max(2);
    Dataset::new(width - 1, classes, features, labels)
}

/// Fixed-length records `[label: u8][pixels: u8 × pixels]`, the layout of
/// the CIFAR-10 binary distribution. Pixels are scaled to `[0, 1]`.
pub fn load_image_records(path: &Path, pixels: usize) -> Result<Dataset, LearnerError> {
    let bytes = fs::read(path).map_err(|e| LearnerError::Data(format!("{}: {e}", path.display())))?;
    let record = pixels + 1;
    if pixels == 0 || bytes.is_empty() || bytes.len() % record != 0 {
        return Err(LearnerError::Data(format!(
            "{} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    let mut features = Vec::with_capacity(bytes.len() / record * pixels);
    let mut labels = Vec::with_capacity(bytes.len() / record);
    for rec in bytes.chunks_exact(record) {
        labels.push(rec[0] as u32);
        features.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    let classes = labels.iter().max().map_or(2, |&m| m as usize + 1).max(2);
    Dataset::new(pixels, classes, features, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    GaussianMixture {
        samples: usize,
        features: usize,
        classes: usize,
        separation: f64,
    },
    Separable {
        samples: usize,
        features: usize,
        #[serde(default)]
        margin: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        label_column: Option<usize>,
    },
    Images {
        path: PathBuf,
        pixels: usize,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Standardize features with training-set moments.
    #[serde(default)]
    pub standardize: bool,
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(LearnerError::InvalidConfig(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }

    /// `(train, test)`.
    pub fn load(&self, seed: &Seed) -> Result<(Dataset, Dataset), LearnerError> {
        self.validate()?;
        let full = match &self.source {
            DataSource::GaussianMixture {
                samples,
                features,
                classes,
                separation,
            } => gaussian_mixture(*samples, *features, *classes, *separation, &seed.derive("generate", &[])),
            DataSource::Separable {
                samples,
                features,
                margin,
            } => linearly_separable(*samples, *features, *margin, &seed.derive("generate", &[])),
            DataSource::Csv { path, label_column } => load_csv(path, *label_column)?,
            DataSource::Images { path, pixels } => load_image_records(path, *pixels)?,
        };
        let (mut train, mut test) = full.split(self.test_fraction, &seed.derive("split", &[]));
        if self.standardize {
            let (mean, std) = train.moments();
            train.standardize_with(&mean, &std);
            test.standardize_with(&mean, &std);
        }
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionConfig {
    /// Contiguous near-equal blocks.
    #[default]
    Uniform,
    /// `[start, end)` per party, in roster order.
    Explicit { ranges: Vec<[usize; 2]> },
}

/// Horizontal partition: party `i` holds rows `ranges[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    ranges: Vec<Range<usize>>,
}

impl Partition {
    pub fn uniform(n: usize, parties: usize) -> Result<Self, LearnerError> {
        if parties == 0 {
            return Err(LearnerError::InvalidConfig("no parties".into()));
        }
        let (base, extra) = (n / parties, n % parties);
        let mut start = 0;
        let ranges = (0..parties)
            .map(|i| {
                let len = base + (i < extra) as usize;
                start += len;
                start - len..start
            })
            .collect();
        Ok(Self { ranges })
    }

    /// Ranges must be disjoint and cover `0..n`.
    pub fn explicit(ranges: Vec<Range<usize>>, n: usize) -> Result<Self, LearnerError> {
        let mut sorted = ranges.clone();
        sorted.sort_by_key(|r| r.start);
        let mut next = 0;
        for r in &sorted {
            if r.start != next || r.end < r.start {
                return Err(LearnerError::InvalidConfig(format!(
                    "partition ranges must be disjoint and cover 0..{n}; gap or overlap at {}",
                    r.start
                )));
            }
            next = r.end;
        }
        if next != n {
            return Err(LearnerError::InvalidConfig(format!(
                "partition covers 0..{next}, dataset has {n} rows"
            )));
        }
        Ok(Self { ranges })
    }

    pub fn from_config(config: &PartitionConfig, n: usize, parties: usize) -> Result<Self, LearnerError> {
        match config {
            PartitionConfig::Uniform => Self::uniform(n, parties),
            PartitionConfig::Explicit { ranges } => {
                if ranges.len() != parties {
                    return Err(LearnerError::InvalidConfig(format!(
                        "{} partition ranges for {parties} parties",
                        ranges.len()
                    )));
                }
                Self::explicit(ranges.iter().map(|[a, b]| *a..*b).collect(), n)
            }
        }
    }

    pub fn parties(&self) -> usize {
        self.ranges.len()
    }

    pub fn range(&self, party: usize) -> Range<usize> {
        self.ranges[party].clone()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    pub fn total(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn uniform_partition_covers() {
        let p = Partition::uniform(10, 3).unwrap();
        assert_eq!(p.counts(), vec![4, 3, 3]);
        assert_eq!(p.range(2), 7..10);
        assert_eq!(p.total(), 10);
    }

    #[test]
    fn explicit_partition_checked() {
        assert!(Partition::explicit(vec![0..3, 3..5], 5).is_ok());
        assert!(Partition::explicit(vec![0..3, 2..5], 5).is_err());
        assert!(Partition::explicit(vec![0..3, 4..5], 5).is_err());
        assert!(Partition::explicit(vec![0..3], 5).is_err());
    }

    #[test]
    fn csv_with_header_and_label_column() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "label,a,b\n1,0.5,2\n0,-1,3\n2,4,4").unwrap();
        let d = load_csv(f.path(), Some(0)).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.classes(), 3);
        assert_eq!(d.x(1), &[-1.0, 3.0]);
        assert_eq!(d.labels(), &[1, 0, 2]);
    }

    #[test]
    fn image_records() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&[3, 0, 255, 1, 51, 102]).unwrap();
        let d = load_image_records(f.path(), 2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.classes(), 4);
        assert_eq!(d.x(0), &[0.0, 1.0]);
        assert!(load_image_records(f.path(), 4).is_err());
    }

    #[test]
    fn separable_has_margin() {
        let d = linearly_separable(200, 5, 0.1, &Seed::from_u64(3));
        assert_eq!(d.len(), 200);
        assert!(d.labels().iter().any(|&l| l == 0) && d.labels().iter().any(|&l| l == 1));
    }

    #[test]
    fn split_sizes() {
        let d = gaussian_mixture(100, 3, 4, 2.0, &Seed::from_u64(1));
        let (train, test) = d.split(0.25, &Seed::from_u64(2));
        assert_eq!((train.len(), test.len()), (75, 25));
    }
}
