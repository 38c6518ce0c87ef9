//! Concept- and label-level evaluation.
//!
//! Concept collapse is `1 − |predicted classes| / |ground-truth classes|`:
//! the fraction of classes present in the ground truth that the model never
//! predicts.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("predictions ({predictions}) and ground truth ({truth}) differ in length")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("class index {index} outside 0..{classes}")]
    ClassOutOfRange { index: usize, classes: usize },
}

/// `classes × classes` counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self, MetricsError> {
        if truth.len() != pred.len() {
            return Err(MetricsError::LengthMismatch {
                predictions: pred.len(),
                truth: truth.len(),
            });
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<(), MetricsError> {
        for index in [truth, pred] {
            if index >= self.classes {
                return Err(MetricsError::ClassOutOfRange {
                    index,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn column_total(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Per-class (precision, recall, F1); zero where undefined.
    pub fn per_class(&self) -> Vec<ClassScores> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let predicted = self.column_total(c) as f64;
                let actual = self.row_total(c) as f64;
                let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
                let recall = if actual > 0.0 { tp / actual } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassScores {
                    precision,
                    recall,
                    f1,
                    support: actual as u64,
                }
            })
            .collect()
    }

    /// Macro F1 over the classes present in the ground truth.
    pub fn macro_f1(&self) -> f64 {
        let scores = self.per_class();
        let present: Vec<&ClassScores> = scores.iter().filter(|s| s.support > 0).collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().map(|s| s.f1).sum::<f64>() / present.len() as f64
    }

    /// Argmax prediction for each ground-truth class with any support.
    pub fn argmax_map(&self) -> Vec<Option<usize>> {
        (0..self.classes)
            .map(|t| {
                if self.row_total(t) == 0 {
                    return None;
                }
                (0..self.classes).max_by_key(|&p| (self.get(t, p), core::cmp::Reverse(p)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Fraction of ground-truth classes that never appear as a prediction.
pub fn concept_collapse(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let truth_classes = (0..cm.classes).filter(|&c| cm.row_total(c) > 0).count();
    let predicted_classes = (0..cm.classes).filter(|&c| cm.column_total(c) > 0).count();
    Ok((1.0 - predicted_classes as f64 / truth_classes as f64).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub acc_c: f64,
    pub f1_c: f64,
    pub acc_y: f64,
    pub f1_y: f64,
    pub cls_c: f64,
    pub concept_scores: Vec<ClassScores>,
    pub label_scores: Vec<ClassScores>,
}

/// Concept and final-label predictions for a set of examples.
///
/// Concepts are flattened over groups: every group value of every example is
/// one concept instance. All groups must share the class count `classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predictions {
    pub concepts: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub concept_confusion: ConfusionMatrix,
    pub label_confusion: ConfusionMatrix,
}

pub fn evaluate(
    predicted: &Predictions,
    truth: &Predictions,
    concept_classes: usize,
    label_classes: usize,
) -> Result<Evaluation, MetricsError> {
    if predicted.concepts.len() != truth.concepts.len() || predicted.labels.len() != truth.labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predicted.concepts.len(),
            truth: truth.concepts.len(),
        });
    }
    let mut concept_confusion = ConfusionMatrix::new(concept_classes);
    for (p, t) in predicted.concepts.iter().zip(&truth.concepts) {
        if p.len() != t.len() {
            return Err(MetricsError::LengthMismatch {
                predictions: p.len(),
                truth: t.len(),
            });
        }
        for (&pc, &tc) in p.iter().zip(t) {
            concept_confusion.record(tc, pc)?;
        }
    }
    let label_confusion = ConfusionMatrix::from_pairs(label_classes, &truth.labels, &predicted.labels)?;
    let report = MetricReport {
        acc_c: concept_confusion.accuracy(),
        f1_c: concept_confusion.macro_f1(),
        acc_y: label_confusion.accuracy(),
        f1_y: label_confusion.macro_f1(),
        cls_c: concept_collapse(&concept_confusion)?,
        concept_scores: concept_confusion.per_class(),
        label_scores: label_confusion.per_class(),
    };
    Ok(Evaluation {
        report,
        concept_confusion,
        label_confusion,
    })
}
