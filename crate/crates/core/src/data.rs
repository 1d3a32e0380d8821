//! Labeled datasets, synthetic Gaussian-cluster generation and the dataset
//! file format.
//!
//! Dataset file: one ASCII header line
//! `QDS1 dim=<dim> classes=<classes> rows=<rows>\n` followed by `rows`
//! records of `dim + 1` little-endian f64 values (features, then the class
//! index stored as a float).

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{QueenError, Result};
use crate::nn::Batch;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    dim: usize,
    n_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, n_classes: usize) -> Self {
        Dataset {
            dim,
            n_classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], label: usize) -> Result<()> {
        if x.len() != self.dim {
            return Err(QueenError::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        if label >= self.n_classes {
            return Err(QueenError::UnknownClass {
                class: label,
                n_classes: self.n_classes,
            });
        }
        self.features.extend_from_slice(x);
        self.labels.push(label);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.dim, self.n_classes);
        for &i in indices {
            out.features.extend_from_slice(self.x(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// One-hot training batch.
    pub fn to_batch(&self) -> Batch {
        let mut b = Batch::new(self.dim, self.n_classes);
        for (x, y) in self.iter() {
            b.push_label(x, y).expect("dataset rows are valid");
        }
        b
    }

    /// Per-feature standard deviation over all rows.
    pub fn feature_std(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for (x, _) in self.iter() {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; self.dim];
        for (x, _) in self.iter() {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = format!(
            "QDS1 dim={} classes={} rows={}\n",
            self.dim,
            self.n_classes,
            self.len()
        );
        let mut out = header.into_bytes();
        for (x, y) in self.iter() {
            for v in x {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(y as f64).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Dataset> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| QueenError::Corrupt("missing dataset header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| QueenError::Corrupt("dataset header is not UTF-8".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("QDS1") {
            return Err(QueenError::Corrupt("bad dataset magic".into()));
        }
        let mut field = |name: &str| -> Result<usize> {
            let p = parts
                .next()
                .ok_or_else(|| QueenError::Corrupt(format!("missing {name}")))?;
            p.strip_prefix(name)
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| QueenError::Corrupt(format!("bad header field {p:?}")))
        };
        let dim = field("dim")?;
        let n_classes = field("classes")?;
        let rows = field("rows")?;
        let body = &bytes[nl + 1..];
        let row_bytes = (dim + 1) * 8;
        if body.len() != rows * row_bytes {
            return Err(QueenError::Corrupt(format!(
                "expected {} body bytes, found {}",
                rows * row_bytes,
                body.len()
            )));
        }
        let mut ds = Dataset::new(dim, n_classes);
        for row in body.chunks_exact(row_bytes) {
            let vals: Vec<f64> = row
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let label = vals[dim];
            if label < 0.0 || label.fract() != 0.0 {
                return Err(QueenError::Corrupt(format!("bad label {label}")));
            }
            ds.push(&vals[..dim], label as usize)?;
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::decode(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub aux_per_class: usize,
    /// Standard deviation of each cluster around its center.
    pub spread: f64,
    /// Standard deviation of the cluster centers around the origin.
    pub center_scale: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_classes: 10,
            dim: 16,
            train_per_class: 300,
            test_per_class: 100,
            aux_per_class: 1200,
            spread: 1.0,
            center_scale: 1.2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(QueenError::InvalidInput("need at least 2 classes".into()));
        }
        if self.dim == 0 {
            return Err(QueenError::InvalidInput("dim must be >= 1".into()));
        }
        if self.train_per_class < 4 {
            return Err(QueenError::InvalidInput(
                "need at least 4 training samples per class".into(),
            ));
        }
        if !(self.spread >= 0.0) || !self.spread.is_finite() {
            return Err(QueenError::InvalidInput("spread must be >= 0".into()));
        }
        if !(self.center_scale > 0.0) || !self.center_scale.is_finite() {
            return Err(QueenError::InvalidInput("center_scale must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub aux: Dataset,
    pub centers: Vec<Vec<f64>>,
    /// Zero spread: every sample of a class coincides with its center.
    pub degenerate: bool,
}

fn row_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Gaussian clusters with the same mixture for all three splits. Rows of the
/// auxiliary and test splits never coincide with a training row.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.center_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        })
        .collect();
    let degenerate = spec.spread == 0.0;

    let sample = |rng: &mut ChaCha8Rng, class: usize| -> Vec<f64> {
        centers[class]
            .iter()
            .map(|c| {
                let n: f64 = StandardNormal.sample(rng);
                c + spec.spread * n
            })
            .collect()
    };

    let draw_split =
        |rng: &mut ChaCha8Rng, per_class: usize, exclude: Option<&HashSet<Vec<u64>>>| -> Dataset {
            let mut ds = Dataset::new(spec.dim, spec.n_classes);
            for class in 0..spec.n_classes {
                let mut made = 0;
                while made < per_class {
                    let x = sample(rng, class);
                    if let Some(ex) = exclude {
                        if !degenerate && ex.contains(&row_key(&x)) {
                            continue;
                        }
                    }
                    ds.push(&x, class).expect("generated row is valid");
                    made += 1;
                }
            }
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(rng);
            ds.subset(&order)
        };

    let train = draw_split(&mut rng, spec.train_per_class, None);
    let train_keys: HashSet<Vec<u64>> = train.iter().map(|(x, _)| row_key(x)).collect();
    let test = draw_split(&mut rng, spec.test_per_class, Some(&train_keys));
    let aux = draw_split(&mut rng, spec.aux_per_class, Some(&train_keys));
    Ok(Splits {
        train,
        test,
        aux,
        centers,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts_are_exact_and_aux_is_disjoint() {
        let spec = DatasetSpec {
            n_classes: 10,
            dim: 8,
            train_per_class: 600,
            test_per_class: 50,
            aux_per_class: 200,
            seed: 5,
            ..DatasetSpec::default()
        };
        let s = generate_dataset(&spec).unwrap();
        assert_eq!(s.train.class_counts(), vec![600; 10]);
        assert_eq!(s.aux.class_counts(), vec![200; 10]);
        let train: HashSet<Vec<u64>> = s.train.iter().map(|(x, _)| row_key(x)).collect();
        assert!(s.aux.iter().all(|(x, _)| !train.contains(&row_key(x))));
    }

    #[test]
    fn zero_spread_is_flagged_degenerate() {
        let spec = DatasetSpec {
            n_classes: 2,
            spread: 0.0,
            train_per_class: 4,
            ..DatasetSpec::default()
        };
        let s = generate_dataset(&spec).unwrap();
        assert!(s.degenerate);
        for class in 0..2 {
            let idx = s.train.class_indices(class);
            assert!(idx.iter().all(|&i| s.train.x(i) == s.train.x(idx[0])));
        }
    }

    #[test]
    fn same_seed_same_splits() {
        let spec = DatasetSpec {
            seed: 11,
            ..DatasetSpec::default()
        };
        assert_eq!(
            generate_dataset(&spec).unwrap(),
            generate_dataset(&spec).unwrap()
        );
    }

    #[test]
    fn rejects_tiny_classes() {
        let spec = DatasetSpec {
            train_per_class: 3,
            ..DatasetSpec::default()
        };
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn file_round_trip() {
        let spec = DatasetSpec {
            n_classes: 3,
            dim: 4,
            train_per_class: 5,
            test_per_class: 1,
            aux_per_class: 1,
            ..DatasetSpec::default()
        };
        let s = generate_dataset(&spec).unwrap();
        let bytes = s.train.encode();
        assert!(bytes.starts_with(b"QDS1 dim=4 classes=3 rows=15\n"));
        assert_eq!(Dataset::decode(&bytes).unwrap(), s.train);
        assert!(Dataset::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
