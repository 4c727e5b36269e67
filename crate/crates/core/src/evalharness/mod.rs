//! Grading metrics and result tables.
//!
//! Accuracy and macro-F1 are computed exactly as rationals from a
//! confusion matrix with one extra column for unparsed predictions; the
//! `f64` wrappers convert at the end. Classes with no support and no
//! predictions score F1 = 0 and still count in the mean.

mod report;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::dtree::Grade;

pub use report::{report, Layout, Report, ReportError, ReportRow};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no labeled pairs")]
    Empty,
    #[error("empty grade set")]
    NoClasses,
    #[error("truth grade {0} is not in the grade set")]
    UnknownTruth(Grade),
}

/// A prediction and its ground truth. Predictions outside the grade set,
/// including the unparsed sentinel, are counted as wrong.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledPair {
    pub predicted: Grade,
    pub truth: Grade,
}

impl LabeledPair {
    pub fn new(predicted: impl Into<Grade>, truth: impl Into<Grade>) -> Self {
        LabeledPair {
            predicted: predicted.into(),
            truth: truth.into(),
        }
    }
}

/// K×(K+1) counts: rows are truths, columns predictions; the last column
/// collects predictions outside the grade set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<Grade>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: &[Grade], pairs: &[LabeledPair]) -> Result<Self, MetricsError> {
        if classes.is_empty() {
            return Err(MetricsError::NoClasses);
        }
        if pairs.is_empty() {
            return Err(MetricsError::Empty);
        }
        let k = classes.len();
        let index = |g: &Grade| classes.iter().position(|c| c == g);
        let mut counts = vec![vec![0u64; k + 1]; k];
        for p in pairs {
            let t = index(&p.truth).ok_or_else(|| MetricsError::UnknownTruth(p.truth.clone()))?;
            let col = index(&p.predicted).unwrap_or(k);
            counts[t][col] += 1;
        }
        Ok(ConfusionMatrix {
            classes: classes.to_vec(),
            counts,
        })
    }

    pub fn classes(&self) -> &[Grade] {
        &self.classes
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    /// Row `truth`, column `predicted`; column K is the unparsed column.
    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn unparsed(&self) -> u64 {
        self.counts.iter().map(|row| row[self.k()]).sum()
    }

    pub fn tp(&self, i: usize) -> u64 {
        self.counts[i][i]
    }

    pub fn fp(&self, i: usize) -> u64 {
        (0..self.k()).filter(|&t| t != i).map(|t| self.counts[t][i]).sum()
    }

    pub fn fn_(&self, i: usize) -> u64 {
        self.counts[i].iter().sum::<u64>() - self.tp(i)
    }

    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn accuracy_exact(&self) -> Ratio<u128> {
        let correct: u64 = (0..self.k()).map(|i| self.tp(i)).sum();
        Ratio::new(correct as u128, self.total() as u128)
    }

    pub fn f1_exact(&self, i: usize) -> Ratio<u128> {
        let tp = self.tp(i) as u128;
        let denom = 2 * tp + self.fp(i) as u128 + self.fn_(i) as u128;
        if denom == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(2 * tp, denom)
        }
    }

    pub fn macro_f1_exact(&self) -> Ratio<u128> {
        let sum = (0..self.k()).fold(Ratio::from_integer(0), |acc, i| acc + self.f1_exact(i));
        sum / Ratio::from_integer(self.k() as u128)
    }
}

pub fn ratio_to_f64(r: Ratio<u128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn accuracy_exact(classes: &[Grade], pairs: &[LabeledPair]) -> Result<Ratio<u128>, MetricsError> {
    Ok(ConfusionMatrix::new(classes, pairs)?.accuracy_exact())
}

pub fn macro_f1_exact(classes: &[Grade], pairs: &[LabeledPair]) -> Result<Ratio<u128>, MetricsError> {
    Ok(ConfusionMatrix::new(classes, pairs)?.macro_f1_exact())
}

pub fn accuracy(classes: &[Grade], pairs: &[LabeledPair]) -> Result<f64, MetricsError> {
    accuracy_exact(classes, pairs).map(ratio_to_f64)
}

pub fn macro_f1(classes: &[Grade], pairs: &[LabeledPair]) -> Result<f64, MetricsError> {
    macro_f1_exact(classes, pairs).map(ratio_to_f64)
}

/// Accuracy and macro-F1 of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc: f64,
    pub mf1: f64,
    pub n: u64,
    pub correct: u64,
    pub unparsed: u64,
}

pub fn summarize(classes: &[Grade], pairs: &[LabeledPair]) -> Result<Summary, MetricsError> {
    let cm = ConfusionMatrix::new(classes, pairs)?;
    Ok(Summary {
        acc: ratio_to_f64(cm.accuracy_exact()),
        mf1: ratio_to_f64(cm.macro_f1_exact()),
        n: cm.total(),
        correct: (0..cm.k()).map(|i| cm.tp(i)).sum(),
        unparsed: cm.unparsed(),
    })
}
