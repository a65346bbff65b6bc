//! Binary classification data for the hyper-cleaning problem.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::std_normal;
use crate::error::{Error, Result};
use crate::Vector;

/// Feature rows with `{0, 1}` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n x d`, one example per row.
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> Vector {
        self.features.row(i).transpose()
    }

    /// Largest Euclidean norm of a feature row.
    pub fn max_row_norm(&self) -> f64 {
        self.features
            .row_iter()
            .map(|r| r.norm())
            .fold(0.0, f64::max)
    }
}

/// Train and validation sets plus which training labels were flipped.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedData {
    pub train: Dataset,
    pub val: Dataset,
    /// Clean training labels before corruption.
    pub train_clean_labels: Vec<f64>,
    pub flipped: Vec<bool>,
    /// Weights of the logistic model that generated the labels.
    pub planted: Vector,
}

impl CorruptedData {
    pub fn flipped_fraction(&self) -> f64 {
        if self.flipped.is_empty() {
            return 0.0;
        }
        self.flipped.iter().filter(|&&f| f).count() as f64 / self.flipped.len() as f64
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gaussian features `N(0, I/d)` with labels drawn from a planted logistic
/// model; each training label is flipped independently with probability `p`.
/// Validation labels are never corrupted.
pub fn generate_corrupted_dataset(
    n_train: usize,
    n_val: usize,
    d: usize,
    p: f64,
    seed: u64,
) -> CorruptedData {
    assert!(
        (0.0..=1.0).contains(&p),
        "corruption rate must lie in [0, 1]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Planted weights of norm about 4 keep the clean labels mostly separable.
    let planted = Vector::from_fn(d, |_, _| 4.0 * std_normal(&mut rng));
    let feat = Normal::new(0.0, 1.0 / (d.max(1) as f64).sqrt()).expect("valid normal");
    let draw = |n: usize, rng: &mut ChaCha8Rng| {
        let features = DMatrix::from_fn(n, d, |_, _| feat.sample(rng));
        let labels: Vec<f64> = (0..n)
            .map(|i| {
                let z = features.row(i).transpose().dot(&planted);
                if rng.random::<f64>() < sigmoid(z) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Dataset { features, labels }
    };
    let mut train = draw(n_train, &mut rng);
    let val = draw(n_val, &mut rng);
    let train_clean_labels = train.labels.clone();
    let flipped: Vec<bool> = (0..n_train).map(|_| rng.random::<f64>() < p).collect();
    for (label, &f) in train.labels.iter_mut().zip(&flipped) {
        if f {
            *label = 1.0 - *label;
        }
    }
    CorruptedData {
        train,
        val,
        train_clean_labels,
        flipped,
        planted,
    }
}

/// Reads a dataset with header `f1,...,fd,label` and labels in `{0, 1}`.
pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())
        .map_err(|e| Error::Parse(format!("{}: {e}", path.as_ref().display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    let cols = headers.len();
    if cols < 2 || &headers[cols - 1] != "label" {
        return Err(Error::Parse("expected header f1,...,fd,label".into()));
    }
    for (j, h) in headers.iter().take(cols - 1).enumerate() {
        if h != format!("f{}", j + 1) {
            return Err(Error::Parse(format!("unexpected feature column {h:?}")));
        }
    }
    let d = cols - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        if record.len() != cols {
            return Err(Error::Parse(format!(
                "row {} has {} fields",
                line + 2,
                record.len()
            )));
        }
        for field in record.iter().take(d) {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))?,
            );
        }
        let label = match record[d].trim() {
            "0" => 0.0,
            "1" => 1.0,
            other => return Err(Error::Parse(format!("row {}: label {other:?}", line + 2))),
        };
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset("csv"));
    }
    Ok(Dataset {
        features: DMatrix::from_row_slice(labels.len(), d, &values),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corruption_extremes() {
        let clean = generate_corrupted_dataset(200, 10, 5, 0.0, 1);
        assert_eq!(clean.train.labels, clean.train_clean_labels);
        let all = generate_corrupted_dataset(200, 10, 5, 1.0, 1);
        for (a, b) in all.train.labels.iter().zip(&all.train_clean_labels) {
            assert_eq!(*a, 1.0 - b);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("sustain-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.csv");
        std::fs::write(&path, "f1,f2,label\n0.5,-1,1\n2,3.25,0\n").unwrap();
        let d = load_dataset_csv(&path).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.row(1)[1], 3.25);
        assert_eq!(d.labels, vec![1.0, 0.0]);
        std::fs::write(&path, "a,b,label\n1,2,0\n").unwrap();
        assert!(load_dataset_csv(&path).is_err());
        std::fs::write(&path, "f1,label\n1,2\n").unwrap();
        assert!(load_dataset_csv(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
