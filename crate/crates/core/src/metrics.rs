//! Confusion matrix and the overall accuracy, average accuracy and kappa
//! indicators.

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{Error, Result};

/// `classes x classes` counts; rows are true classes, columns predictions.
/// Class indices are zero-based here (class `k` is label `k + 1`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Data(format!(
                "{} counts for a {classes}x{classes} confusion matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Overall accuracy, percent.
    pub oa: f64,
    /// Average of per-class accuracies over classes present in the test
    /// set, percent.
    pub aa: f64,
    pub kappa_x100: f64,
    /// Per-class accuracy in percent; `None` for classes without test
    /// samples.
    pub per_class: Vec<Option<f64>>,
    pub split: Option<SplitSpec>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

pub fn metrics_from_confusion(m: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    let n = total as f64;
    let po = m.trace() as f64 / n;
    let pe: f64 = (0..m.classes())
        .map(|k| m.row_sum(k) as f64 * m.col_sum(k) as f64)
        .sum::<f64>()
        / (n * n);
    // pe == 1 only when every sample sits in one class, predicted as that
    // class; agreement is then perfect
    let kappa = if (1.0 - pe).abs() < f64::EPSILON {
        1.0
    } else {
        (po - pe) / (1.0 - pe)
    };
    let per_class: Vec<Option<f64>> = (0..m.classes())
        .map(|k| {
            let r = m.row_sum(k);
            (r > 0).then(|| 100.0 * m.get(k, k) as f64 / r as f64)
        })
        .collect();
    let populated: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = populated.iter().sum::<f64>() / populated.len() as f64;
    Ok(MetricsReport {
        oa: 100.0 * po,
        aa,
        kappa_x100: 100.0 * kappa,
        per_class,
        split: None,
        seed: None,
        config_hash: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_is_perfect() {
        let m = ConfusionMatrix::from_counts(2, vec![10, 0, 0, 10]).unwrap();
        let r = metrics_from_confusion(&m).unwrap();
        assert_eq!((r.oa, r.aa, r.kappa_x100), (100.0, 100.0, 100.0));
    }

    #[test]
    fn hand_evaluated_kappa() {
        let m = ConfusionMatrix::from_counts(2, vec![9, 1, 1, 9]).unwrap();
        let r = metrics_from_confusion(&m).unwrap();
        assert!((r.oa - 90.0).abs() < 1e-12);
        assert!((r.aa - 90.0).abs() < 1e-12);
        assert!((r.kappa_x100 - 80.0).abs() < 1e-12);
    }

    #[test]
    fn empty_class_is_skipped_in_aa() {
        let m = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 0, 0, 1, 0, 1]).unwrap();
        let r = metrics_from_confusion(&m).unwrap();
        assert_eq!(r.per_class, vec![Some(100.0), None, Some(50.0)]);
        assert!((r.aa - 75.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_is_an_error() {
        assert!(metrics_from_confusion(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn single_class_perfect() {
        let m = ConfusionMatrix::from_counts(2, vec![5, 0, 0, 0]).unwrap();
        assert_eq!(metrics_from_confusion(&m).unwrap().kappa_x100, 100.0);
    }
}
