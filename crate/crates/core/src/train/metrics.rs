use serde::Serialize;

use crate::data::Class;
use crate::error::{dim_err, invalid, Result};
use crate::tensor::Tensor;

const K: usize = Class::ALL.len();

/// Rows are the true class, columns the predicted class, both in
/// [`Class::ALL`] order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negative counts are rejected.
    pub fn from_counts(counts: [[i64; K]; K]) -> Result<Self> {
        let mut cm = Self::new();
        for (i, row) in counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                cm.counts[i][j] = u64::try_from(v).map_err(|_| invalid!("confusion count ({i}, {j}) is negative: {v}"))?;
            }
        }
        Ok(cm)
    }

    pub fn counts(&self) -> &[[u64; K]; K] {
        &self.counts
    }

    pub fn record(&mut self, truth: Class, predicted: Class) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    /// Adds one row of logits per true class, predicting by [`argmax`].
    pub fn record_logits(&mut self, logits: &Tensor, truth: &[Class]) -> Result<()> {
        if logits.shape() != [truth.len(), K] {
            return Err(dim_err!(
                "expected {}×{K} logits, got {:?}",
                truth.len(),
                logits.shape()
            ));
        }
        for (row, &t) in logits.data().chunks(K).zip(truth) {
            self.record(t, Class::ALL[argmax(row)]);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for i in 0..K {
            for j in 0..K {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn column_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..K).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// Comma-separated rows with a header of class names.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for c in Class::ALL {
            s.push(',');
            s.push_str(c.name());
        }
        s.push('\n');
        for c in Class::ALL {
            s.push_str(c.name());
            for v in self.counts[c.index()] {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Metrics reported as 0 because their denominator was 0.
    pub undefined: Vec<&'static str>,
}

/// One-vs-rest precision, sensitivity (recall), specificity and F1 for each
/// class. A zero denominator yields 0 and is listed in `undefined`.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<[ClassMetrics; K]> {
    let total = cm.total();
    if total == 0 {
        return Err(invalid!("confusion matrix is empty"));
    }
    Ok(std::array::from_fn(|c| {
        let tp = cm.counts[c][c];
        let row = cm.row_sum(c);
        let col = cm.column_sum(c);
        let (fn_, fp) = (row - tp, col - tp);
        let tn = total + tp - row - col;
        let mut undefined = Vec::new();
        let mut ratio = |name: &'static str, num: u64, den: u64| {
            if den == 0 {
                undefined.push(name);
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio("precision", tp, tp + fp);
        let sensitivity = ratio("sensitivity", tp, tp + fn_);
        let specificity = ratio("specificity", tn, tn + fp);
        let f1 = if precision + sensitivity == 0.0 {
            undefined.push("f1");
            0.0
        } else {
            2.0 * precision * sensitivity / (precision + sensitivity)
        };
        ClassMetrics {
            precision,
            sensitivity,
            specificity,
            f1,
            undefined,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_diagonal() {
        let cm = ConfusionMatrix::from_counts([[3, 0, 0, 0], [0, 5, 0, 0], [0, 0, 2, 0], [0, 0, 0, 9]]).unwrap();
        assert_eq!(cm.accuracy(), 1.0);
        for m in compute_metrics(&cm).unwrap() {
            assert_eq!((m.precision, m.sensitivity, m.specificity, m.f1), (1.0, 1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn hand_two_by_two() {
        let cm = ConfusionMatrix::from_counts([[5, 1, 0, 0], [2, 4, 0, 0], [0; 4], [0; 4]]).unwrap();
        let m = &compute_metrics(&cm).unwrap()[0];
        assert!((m.precision - 5.0 / 7.0).abs() < 1e-15);
        assert!((m.sensitivity - 5.0 / 6.0).abs() < 1e-15);
        assert!((m.f1 - 0.7692).abs() < 1e-4);
        let empty = &compute_metrics(&cm).unwrap()[2];
        assert_eq!(empty.precision, 0.0);
        assert!(empty.undefined.contains(&"precision") && empty.undefined.contains(&"sensitivity"));
    }

    #[test]
    fn negative_counts_rejected() {
        let mut c = [[1i64; 4]; 4];
        c[2][1] = -1;
        assert!(ConfusionMatrix::from_counts(c).is_err());
        assert!(compute_metrics(&ConfusionMatrix::new()).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.0]), 1);
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::from_counts([[1, 2, 3, 4], [0; 4], [0; 4], [0; 4]]).unwrap();
        let text = cm.to_csv();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "healthy,1,2,3,4");
    }
}
