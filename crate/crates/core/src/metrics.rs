//! Confusion matrices and the accuracy / F1 summaries derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{NUM_CLASSES, STAGE_NAMES};

/// Rows are true stages, columns predicted stages.
pub type Confusion = [[u64; NUM_CLASSES]; NUM_CLASSES];

pub fn confusion_matrix(preds: &[usize], labels: &[usize]) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = [[0; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= NUM_CLASSES || y >= NUM_CLASSES {
            return Err(Error::Argument(format!(
                "class index out of range: predicted {p}, true {y}"
            )));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    /// `None` for classes that appear in neither the labels nor the predictions.
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// F1 = 2PR / (P + R) per class. A class with no true and no predicted
/// epochs is left out of the macro mean; any other 0/0 counts as 0.
pub fn f1_scores(m: &Confusion) -> Scores {
    let total: u64 = m.iter().flatten().sum();
    let trace: u64 = (0..NUM_CLASSES).map(|i| m[i][i]).sum();
    let mut per_class = [None; NUM_CLASSES];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let tp = m[c][c] as f64;
        let row: u64 = m[c].iter().sum();
        let col: u64 = m.iter().map(|r| r[c]).sum();
        if row + col == 0 {
            continue;
        }
        // 2PR/(P+R) simplifies to 2tp/(row+col).
        *slot = Some(2.0 * tp / (row + col) as f64);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_f1 = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Scores {
        per_class,
        macro_f1,
        accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassF1 {
    #[serde(rename = "W")]
    pub w: Option<f64>,
    #[serde(rename = "N1")]
    pub n1: Option<f64>,
    #[serde(rename = "N2")]
    pub n2: Option<f64>,
    #[serde(rename = "N3")]
    pub n3: Option<f64>,
    #[serde(rename = "REM")]
    pub rem: Option<f64>,
}

impl PerClassF1 {
    pub fn as_array(&self) -> [Option<f64>; NUM_CLASSES] {
        [self.w, self.n1, self.n2, self.n3, self.rem]
    }
}

impl From<[Option<f64>; NUM_CLASSES]> for PerClassF1 {
    fn from(a: [Option<f64>; NUM_CLASSES]) -> Self {
        PerClassF1 {
            w: a[0],
            n1: a[1],
            n2: a[2],
            n3: a[3],
            rem: a[4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: PerClassF1,
    pub confusion: Confusion,
    pub n_epochs_evaluated: u64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        let s = f1_scores(&confusion);
        MetricsReport {
            accuracy: s.accuracy,
            macro_f1: s.macro_f1,
            per_class_f1: s.per_class.into(),
            confusion,
            n_epochs_evaluated: confusion.iter().flatten().sum(),
        }
    }

    pub fn from_predictions(preds: &[usize], labels: &[usize]) -> Result<Self> {
        Ok(Self::from_confusion(confusion_matrix(preds, labels)?))
    }

    /// Adds the counts of `other` to this report's confusion and recomputes.
    pub fn merge(&self, other: &MetricsReport) -> Self {
        let mut m = self.confusion;
        for (row, orow) in m.iter_mut().zip(&other.confusion) {
            for (v, o) in row.iter_mut().zip(orow) {
                *v += o;
            }
        }
        Self::from_confusion(m)
    }

    /// A plain-text table of the confusion matrix and scores.
    pub fn table(&self) -> String {
        let mut out = format!("{:>6}", "");
        for name in STAGE_NAMES {
            out += &format!("{name:>7}");
        }
        out += "     F1\n";
        for (i, row) in self.confusion.iter().enumerate() {
            out += &format!("{:>6}", STAGE_NAMES[i]);
            for v in row {
                out += &format!("{v:>7}");
            }
            match self.per_class_f1.as_array()[i] {
                Some(f) => out += &format!("  {f:.3}\n"),
                None => out += "      -\n",
            }
        }
        out += &format!(
            "accuracy {:.4}  macro F1 {:.4}  epochs {}",
            self.accuracy, self.macro_f1, self.n_epochs_evaluated
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_is_perfect() {
        let labels = vec![0, 1, 2, 3, 4, 2];
        let r = MetricsReport::from_predictions(&labels, &labels).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert!(r.per_class_f1.as_array().iter().all(|f| *f == Some(1.0)));
    }

    #[test]
    fn single_off_diagonal_count() {
        let m = confusion_matrix(&[0], &[4]).unwrap();
        assert_eq!(m[4][0], 1);
        assert_eq!(m.iter().flatten().sum::<u64>(), 1);
        assert!(confusion_matrix(&[5], &[0]).is_err());
        assert!(confusion_matrix(&[0], &[]).is_err());
    }

    #[test]
    fn two_class_toy() {
        let mut m = [[0; 5]; 5];
        m[0] = [1, 1, 0, 0, 0];
        m[1] = [0, 2, 0, 0, 0];
        let s = f1_scores(&m);
        assert!((s.per_class[0].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.per_class[1].unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(s.per_class[2], None);
        assert!((s.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_json_shape() {
        let r = MetricsReport::from_predictions(&[2, 2], &[2, 0]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["per_class_f1"]["N1"], serde_json::Value::Null);
        assert_eq!(v["per_class_f1"]["W"], 0.0);
        assert_eq!(v["n_epochs_evaluated"], 2);
        assert_eq!(v["confusion"][0][2], 1);
        let back: MetricsReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn accuracy_is_trace_over_total(cells in proptest::collection::vec(0u64..50, 25)) {
            let mut m = [[0; 5]; 5];
            for (i, v) in cells.iter().enumerate() {
                m[i / 5][i % 5] = *v;
            }
            let s = f1_scores(&m);
            let total: u64 = cells.iter().sum();
            let trace: u64 = (0..5).map(|i| m[i][i]).sum();
            if total > 0 {
                prop_assert!((s.accuracy - trace as f64 / total as f64).abs() < 1e-12);
            }
            let present: Vec<f64> = s.per_class.iter().flatten().copied().collect();
            for f in &present {
                prop_assert!((0.0..=1.0).contains(f));
            }
            if !present.is_empty() {
                let lo = present.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = present.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(s.macro_f1 >= lo - 1e-12 && s.macro_f1 <= hi + 1e-12);
            }
        }

        #[test]
        fn relabeling_permutes_scores(
            pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..200),
            perm in Just([0usize, 1, 2, 3, 4]).prop_shuffle(),
        ) {
            let (preds, labels): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let a = f1_scores(&confusion_matrix(&preds, &labels).unwrap());
            let pp: Vec<_> = preds.iter().map(|&p| perm[p]).collect();
            let pl: Vec<_> = labels.iter().map(|&l| perm[l]).collect();
            let b = f1_scores(&confusion_matrix(&pp, &pl).unwrap());
            prop_assert_eq!(a.accuracy, b.accuracy);
            for c in 0..5 {
                prop_assert_eq!(a.per_class[c], b.per_class[perm[c]]);
            }
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        }
    }
}
