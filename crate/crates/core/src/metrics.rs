//! VQA accuracy, per-type accuracy, arithmetic/harmonic mean-per-type and
//! question-type classification accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::diffcore::text::fmt_real;
use crate::error::{Error, Result};

/// Credit for predicting `prediction`: its stored soft score, capped at 1.
pub fn vqa_accuracy(prediction: usize, answer_scores: &[(usize, f64)]) -> f64 {
    answer_scores
        .iter()
        .find(|(a, _)| *a == prediction)
        .map_or(0.0, |(_, s)| s.min(1.0))
}

/// `(arithmetic, harmonic)` means of per-type accuracies. The harmonic mean is
/// 0 when any type scores 0.
pub fn mpt(per_type: &[f64]) -> Result<(f64, f64)> {
    if per_type.is_empty() {
        return Err(Error::Validation(
            "mean-per-type needs at least one type".into(),
        ));
    }
    let n = per_type.len() as f64;
    let arithmetic = per_type.iter().sum::<f64>() / n;
    let harmonic = if per_type.iter().any(|&a| a <= 0.0) {
        0.0
    } else {
        n / per_type.iter().map(|a| 1.0 / a).sum::<f64>()
    };
    Ok((arithmetic, harmonic))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeStats {
    pub name: String,
    pub accuracy: f64,
    pub count: usize,
}

/// Fraction of exact matches, overall and per true label. Categories with no
/// samples report accuracy 0 and count 0.
pub fn qtype_accuracy(
    predictions: &[usize],
    labels: &[usize],
    names: &[String],
) -> Result<(f64, Vec<TypeStats>)> {
    if predictions.len() != labels.len() {
        return Err(Error::dim(
            "qtype_accuracy",
            format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    let mut correct = vec![0usize; names.len()];
    let mut count = vec![0usize; names.len()];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= names.len() {
            return Err(Error::Validation(format!(
                "label {l} out of range {}",
                names.len()
            )));
        }
        count[l] += 1;
        correct[l] += usize::from(p == l);
    }
    let total: usize = correct.iter().sum();
    let overall = if labels.is_empty() {
        0.0
    } else {
        total as f64 / labels.len() as f64
    };
    let per = names
        .iter()
        .enumerate()
        .map(|(i, n)| TypeStats {
            name: n.clone(),
            accuracy: if count[i] == 0 {
                0.0
            } else {
                correct[i] as f64 / count[i] as f64
            },
            count: count[i],
        })
        .collect();
    Ok((overall, per))
}

/// One question's predicted answer and question type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub answer: usize,
    pub qtype: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub overall_accuracy: f64,
    pub arithmetic_mpt: f64,
    pub harmonic_mpt: f64,
    pub qtype_classification_accuracy: f64,
    /// VQA accuracy grouped by the true question type.
    pub per_type: Vec<TypeStats>,
    /// Question-type classification accuracy grouped by the true type.
    pub qtype_per_type: Vec<TypeStats>,
}

impl MetricsReport {
    pub fn from_predictions(bundle: &DatasetBundle, predictions: &[Prediction]) -> Result<Self> {
        if predictions.len() != bundle.samples.len() {
            return Err(Error::dim(
                "metrics",
                format!(
                    "{} predictions for {} samples",
                    predictions.len(),
                    bundle.samples.len()
                ),
            ));
        }
        if predictions.is_empty() {
            return Err(Error::Validation("nothing to evaluate".into()));
        }
        let names = bundle.qtypes.names();
        let mut credit = vec![0.0; names.len()];
        let mut count = vec![0usize; names.len()];
        let mut total = 0.0;
        for (s, p) in bundle.samples.iter().zip(predictions) {
            let c = vqa_accuracy(p.answer, &s.answer_scores);
            credit[s.qtype] += c;
            count[s.qtype] += 1;
            total += c;
        }
        let per_type: Vec<TypeStats> = names
            .iter()
            .enumerate()
            .map(|(i, n)| TypeStats {
                name: n.clone(),
                accuracy: if count[i] == 0 {
                    0.0
                } else {
                    credit[i] / count[i] as f64
                },
                count: count[i],
            })
            .collect();
        let present: Vec<f64> = per_type
            .iter()
            .filter(|t| t.count > 0)
            .map(|t| t.accuracy)
            .collect();
        let (arithmetic_mpt, harmonic_mpt) = mpt(&present)?;
        let labels: Vec<usize> = bundle.samples.iter().map(|s| s.qtype).collect();
        let preds: Vec<usize> = predictions.iter().map(|p| p.qtype).collect();
        let (qtype_classification_accuracy, qtype_per_type) =
            qtype_accuracy(&preds, &labels, names)?;
        Ok(MetricsReport {
            samples: predictions.len(),
            overall_accuracy: total / predictions.len() as f64,
            arithmetic_mpt,
            harmonic_mpt,
            qtype_classification_accuracy,
            per_type,
            qtype_per_type,
        })
    }

    pub fn render_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Flat `section,key,value` rows.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("section,key,value\n");
        let row = |out: &mut String, sec: &str, key: &str, v: String| {
            writeln!(out, "{sec},{key},{v}").unwrap();
        };
        row(&mut out, "overall", "samples", self.samples.to_string());
        row(
            &mut out,
            "overall",
            "accuracy",
            fmt_real(self.overall_accuracy),
        );
        row(
            &mut out,
            "overall",
            "arithmetic_mpt",
            fmt_real(self.arithmetic_mpt),
        );
        row(
            &mut out,
            "overall",
            "harmonic_mpt",
            fmt_real(self.harmonic_mpt),
        );
        row(
            &mut out,
            "overall",
            "qtype_accuracy",
            fmt_real(self.qtype_classification_accuracy),
        );
        for t in &self.per_type {
            row(&mut out, "answer_accuracy", &t.name, fmt_real(t.accuracy));
            row(&mut out, "answer_count", &t.name, t.count.to_string());
        }
        for t in &self.qtype_per_type {
            row(&mut out, "qtype_accuracy", &t.name, fmt_real(t.accuracy));
        }
        out
    }

    /// Per-category table with accuracies in percent.
    pub fn render_table(&self) -> String {
        let width = self
            .per_type
            .iter()
            .map(|t| t.name.len())
            .max()
            .unwrap_or(8)
            .max(14);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}\n",
            "question type", "count", "answer%", "qtype%"
        );
        for (a, q) in self.per_type.iter().zip(&self.qtype_per_type) {
            writeln!(
                out,
                "{:<width$}  {:>8}  {:>8.2}  {:>8.2}",
                a.name,
                a.count,
                100.0 * a.accuracy,
                100.0 * q.accuracy
            )
            .unwrap();
        }
        writeln!(
            out,
            "{:<width$}  {:>8}  {:>8.2}  {:>8.2}",
            "overall",
            self.samples,
            100.0 * self.overall_accuracy,
            100.0 * self.qtype_classification_accuracy
        )
        .unwrap();
        writeln!(
            out,
            "{:<width$}  {:>8}  {:>8.2}",
            "arithmetic MPT",
            "",
            100.0 * self.arithmetic_mpt
        )
        .unwrap();
        writeln!(
            out,
            "{:<width$}  {:>8}  {:>8.2}",
            "harmonic MPT",
            "",
            100.0 * self.harmonic_mpt
        )
        .unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vqa_credit() {
        assert_eq!(vqa_accuracy(2, &[(2, 1.0)]), 1.0);
        assert_eq!(vqa_accuracy(1, &[(2, 1.0)]), 0.0);
        assert_eq!(vqa_accuracy(0, &[(0, 0.3), (1, 0.9)]), 0.3);
    }

    #[test]
    fn mpt_cases() {
        let (a, h) = mpt(&[1.0, 0.5]).unwrap();
        assert_eq!(a, 0.75);
        assert!((h - 2.0 / 3.0).abs() < 1e-15);
        let (a, h) = mpt(&[0.4, 0.4, 0.4]).unwrap();
        assert!((a - 0.4).abs() < 1e-15 && (h - 0.4).abs() < 1e-15);
        assert_eq!(mpt(&[0.9, 0.0]).unwrap().1, 0.0);
        assert!(mpt(&[]).is_err());
    }

    #[test]
    fn qtype_accuracy_cases() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(qtype_accuracy(&[0, 1], &[0, 1], &names).unwrap().0, 1.0);
        let (acc, per) = qtype_accuracy(&[0, 0], &[0, 1], &names).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!((per[2].accuracy, per[2].count), (0.0, 0));
        assert!(qtype_accuracy(&[0], &[0, 1], &names).is_err());
    }

    proptest! {
        #[test]
        fn harmonic_never_exceeds_arithmetic(accs in proptest::collection::vec(0.0f64..=1.0, 1..12)) {
            let (a, h) = mpt(&accs).unwrap();
            prop_assert!(h <= a + 1e-12);
        }

        #[test]
        fn qtype_accuracy_is_permutation_invariant(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..40),
            rot in 0usize..40,
        ) {
            let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
            let (p, l): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let mut rotated = pairs.clone();
            rotated.rotate_left(rot % pairs.len());
            let (p2, l2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            prop_assert_eq!(qtype_accuracy(&p, &l, &names).unwrap(), qtype_accuracy(&p2, &l2, &names).unwrap());
        }
    }
}
