use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Single-label classification summary. Rows of `confusion` are true
/// classes, columns predictions.
///
/// Macro averages run over the classes that occur as a truth or as a
/// prediction; a ratio with an empty denominator counts as 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    /// Macro-averaged per-class recall (ACC).
    pub acc_unweighted: f64,
    /// Fraction of correct predictions (WACC).
    pub acc_weighted: f64,
    /// Macro-averaged precision.
    pub precision: f64,
    /// Macro-averaged recall.
    pub recall: f64,
    pub micro_f1: f64,
    /// Support-weighted mean of per-class F1 (WF1).
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn confusion_matrix(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Vec<Vec<u64>>> {
    if truth.len() != pred.len() {
        return Err(Error::shape("confusion_matrix", format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    let mut cm = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::InvalidArgument(format!("class index ({t}, {p}) outside [0, {classes})")));
        }
        cm[t][p] += 1;
    }
    Ok(cm)
}

/// Element-wise sum of two confusion matrices of equal size.
pub fn merge_confusion(a: &mut [Vec<u64>], b: &[Vec<u64>]) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += y;
        }
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|r| r.len() != c) {
            return Err(Error::shape("metrics", "confusion matrix must be square and non-empty"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Data("no samples to evaluate".into()));
        }
        let correct: u64 = (0..c).map(|k| confusion[k][k]).sum();
        let mut per_class = Vec::with_capacity(c);
        let (mut p_sum, mut r_sum, mut wf1, mut active) = (0.0, 0.0, 0.0, 0usize);
        for k in 0..c {
            let tp = confusion[k][k];
            let support: u64 = confusion[k].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[k]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = ratio(2 * tp, support + predicted);
            if support + predicted > 0 {
                active += 1;
                p_sum += precision;
                r_sum += recall;
            }
            wf1 += support as f64 * f1;
            per_class.push(ClassMetrics {
                precision,
                recall,
                f1,
                support,
            });
        }
        let acc = ratio(correct, total);
        let recall = r_sum / active as f64;
        Ok(Self {
            confusion,
            acc_unweighted: recall,
            acc_weighted: acc,
            precision: p_sum / active as f64,
            recall,
            // Pooled counts: every miss is one FP and one FN.
            micro_f1: ratio(2 * correct, 2 * correct + 2 * (total - correct)),
            weighted_f1: wf1 / total as f64,
            per_class,
        })
    }

    pub fn samples(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples        {}", self.samples())?;
        writeln!(f, "ACC (macro)    {:.4}", self.acc_unweighted)?;
        writeln!(f, "WACC (overall) {:.4}", self.acc_weighted)?;
        writeln!(f, "WF1            {:.4}", self.weighted_f1)?;
        writeln!(f, "precision      {:.4}", self.precision)?;
        writeln!(f, "recall         {:.4}", self.recall)?;
        writeln!(f, "micro-F1       {:.4}", self.micro_f1)?;
        writeln!(f, "class  precision  recall  f1      support")?;
        for (k, m) in self.per_class.iter().enumerate() {
            writeln!(f, "{k:<6} {:<10.4} {:<7.4} {:<7.4} {}", m.precision, m.recall, m.f1, m.support)?;
        }
        write!(f, "confusion (rows = true):")?;
        for row in &self.confusion {
            write!(f, "\n  {row:?}")?;
        }
        Ok(())
    }
}
