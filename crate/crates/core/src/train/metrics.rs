use std::fmt;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::Model;

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub tp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ClassCounts {
    /// `TP / (TP + FN)`; `None` when the class never occurs.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `TN / (TN + FP)`; `None` when every sample belongs to the class.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    /// `(TP + TN) / (TP + FN + TN + FP)`.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.tp + self.fn_ + self.tn + self.fp)
    }
}

/// Confusion matrix (rows = true class, columns = predicted) with macro-averaged rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
}

impl Metrics {
    pub fn from_predictions(
        predicted: &[usize],
        actual: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if predicted.is_empty() {
            return Err(Error::Data(
                "cannot compute metrics on an empty split".into(),
            ));
        }
        if predicted.len() != actual.len() {
            return Err(Error::shape(
                "metrics",
                format!(
                    "{} predictions for {} labels",
                    predicted.len(),
                    actual.len()
                ),
            ));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&p, &a) in predicted.iter().zip(actual) {
            if p >= num_classes || a >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "class index out of range [0, {num_classes})"
                )));
            }
            confusion[a][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        let mut m = Self {
            confusion,
            accuracy: ratio(trace, total).unwrap_or(0.0),
            macro_sensitivity: 0.0,
            macro_specificity: 0.0,
        };
        let stats: Vec<ClassCounts> = (0..m.num_classes()).map(|c| m.class_counts(c)).collect();
        m.macro_sensitivity = mean(stats.iter().filter_map(ClassCounts::sensitivity));
        m.macro_specificity = mean(stats.iter().filter_map(ClassCounts::specificity));
        m
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn class_counts(&self, c: usize) -> ClassCounts {
        let total = self.total();
        let tp = self.confusion[c][c];
        let row: u64 = self.confusion[c].iter().sum();
        let col: u64 = self.confusion.iter().map(|r| r[c]).sum();
        ClassCounts {
            tp,
            fn_: row - tp,
            fp: col - tp,
            tn: total + tp - row - col,
        }
    }
}

/// Mean of the defined per-class rates; classes whose rate is undefined
/// (zero denominator) are left out.
fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl fmt::Display for Metrics {
    /// Percentages with two decimals followed by the confusion matrix.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Accuracy (%) | Sensitivity (%) | Specificity (%)")?;
        writeln!(
            f,
            "{:.2} | {:.2} | {:.2}",
            100.0 * self.accuracy,
            100.0 * self.macro_sensitivity,
            100.0 * self.macro_specificity
        )?;
        writeln!(f, "confusion (rows = true, cols = predicted):")?;
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Predicts every sample of `split` and summarizes the result.
pub fn evaluate_metrics(model: &Model, data: &Dataset, split: Split) -> Result<Metrics> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let mut predicted = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk)?;
        predicted.extend(model.predict(&x, EVAL_CHUNK)?);
    }
    let actual: Vec<usize> = idx.iter().map(|&i| data.samples[i].label).collect();
    Metrics::from_predictions(&predicted, &actual, model.num_classes())
}

const EVAL_CHUNK: usize = 128;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_hand_case() {
        // class 1 positive: TP=3, FN=1, TN=4, FP=2
        let m = Metrics::from_confusion(vec![vec![4, 2], vec![1, 3]]);
        let c = m.class_counts(1);
        assert_eq!(
            c,
            ClassCounts {
                tp: 3,
                fn_: 1,
                tn: 4,
                fp: 2
            }
        );
        assert_eq!(c.sensitivity(), Some(0.75));
        assert!((c.specificity().unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(c.accuracy(), Some(0.7));
        assert_eq!(m.accuracy, 0.7);
    }

    #[test]
    fn perfect_predictor() {
        let labels = [0, 1, 2, 2, 1, 0, 3];
        let m = Metrics::from_predictions(&labels, &labels, 4).unwrap();
        assert_eq!(
            (m.accuracy, m.macro_sensitivity, m.macro_specificity),
            (1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn errors() {
        assert!(Metrics::from_predictions(&[], &[], 2).is_err());
        assert!(Metrics::from_predictions(&[0], &[0, 1], 2).is_err());
        assert!(Metrics::from_predictions(&[2], &[0], 2).is_err());
    }

    #[test]
    fn table_formatting() {
        let m = Metrics::from_confusion(vec![vec![1, 0], vec![0, 1]]);
        let s = m.to_string();
        assert!(
            s.starts_with(
                "Accuracy (%) | Sensitivity (%) | Specificity (%)\n100.00 | 100.00 | 100.00\n"
            ),
            "{s}"
        );
    }
}
