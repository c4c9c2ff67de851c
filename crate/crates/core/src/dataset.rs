//! Labelled feature vectors: synthetic Gaussian blobs and a CSV loader.
//!
//! CSV files have a header row; the first column is an integer class label
//! and the rest are features.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FfnError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let dim = samples.first().map_or(0, |s| s.features.len());
        if let Some(i) = samples.iter().position(|s| s.features.len() != dim) {
            return Err(FfnError::data(format!("sample {i} has {} features, expected {dim}", samples[i].features.len())));
        }
        let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
        Ok(Dataset { dim, num_classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off every `every`-th sample as a held-out set.
    pub fn split_every(&self, every: usize) -> (Dataset, Dataset) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.iter().enumerate() {
            if every > 0 && i % every == every - 1 { b.push(s.clone()) } else { a.push(s.clone()) }
        }
        let wrap = |samples| Dataset { dim: self.dim, num_classes: self.num_classes, samples };
        (wrap(a), wrap(b))
    }
}

/// `per_class` points around each of `classes` random centres in `dim`
/// dimensions. Centres are drawn with unit variance, points with `spread`.
pub fn gaussian_blobs(per_class: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || dim == 0 {
        return Err(FfnError::config("blob data needs at least one class and one feature"));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| FfnError::config(format!("spread {spread}: {e}")))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut samples = Vec::with_capacity(per_class * classes);
    for i in 0..per_class * classes {
        let label = i % classes;
        let features = centres[label].iter().map(|c| c + noise.sample(&mut rng)).collect();
        samples.push(Sample { features, label });
    }
    Ok(Dataset { dim, num_classes: classes, samples })
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| FfnError::data(format!("cannot read dataset {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| FfnError::data(format!("{}: {e}", path.display())))?;
        let row = i + 2;
        let mut fields = record.iter();
        let label = fields
            .next()
            .and_then(|f| f.trim().parse::<usize>().ok())
            .ok_or_else(|| FfnError::data(format!("{} line {row}: bad label", path.display())))?;
        let features = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| FfnError::data(format!("{} line {row}: {e}", path.display())))?;
        samples.push(Sample { features, label });
    }
    Dataset::new(samples).map_err(|e| FfnError::data(format!("{}: {e}", path.display())))
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FfnError::data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| FfnError::data(format!("{}: {e}", path.display()));
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..data.dim).map(|i| format!("x{i}")))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for s in &data.samples {
        let row: Vec<String> = std::iter::once(s.label.to_string())
            .chain(s.features.iter().map(|v| format!("{v:?}")))
            .collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let a = gaussian_blobs(5, 3, 4, 0.1, 7).unwrap();
        assert_eq!(a.len(), 15);
        assert_eq!(a.num_classes, 3);
        assert_eq!((0..3).map(|c| a.samples.iter().filter(|s| s.label == c).count()).collect::<Vec<_>>(), vec![5, 5, 5]);
        assert_eq!(a, gaussian_blobs(5, 3, 4, 0.1, 7).unwrap());
        assert_ne!(a, gaussian_blobs(5, 3, 4, 0.1, 8).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let data = gaussian_blobs(3, 2, 3, 0.5, 1).unwrap();
        write_csv(&p, &data).unwrap();
        assert_eq!(read_csv(&p).unwrap(), data);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "label,a,b\n0,1.0,2.0\nx,1,2\n").unwrap();
        assert!(matches!(read_csv(&p), Err(FfnError::Data(_))));
        std::fs::write(&p, "label,a,b\n0,1.0,2.0\n1,1\n").unwrap();
        assert!(matches!(read_csv(&p), Err(FfnError::Data(_))));
        assert!(matches!(read_csv(&dir.path().join("missing.csv")), Err(FfnError::Data(_))));
    }

    #[test]
    fn split_keeps_every_sample() {
        let data = gaussian_blobs(4, 2, 2, 0.1, 0).unwrap();
        let (a, b) = data.split_every(4);
        assert_eq!((a.len(), b.len()), (6, 2));
    }
}
