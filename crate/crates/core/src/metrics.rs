//! Confusion counts, precision/recall/F1, rank-based ROC-AUC and the
//! tabular report format.

use serde::{Deserialize, Serialize};

use crate::curriculum::Sample;
use crate::error::{Error, Result};
use crate::infotheory::Predictor;

/// Column order of every metrics table.
pub const CSV_HEADER: &str = "Strategy,Dataset,Precision,Recall,F1-Score,ROC-AUC,Accuracy";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    /// Row = true class, column = predicted class.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if k == 0 || counts.len() != k * k {
            return Err(Error::invalid(format!(
                "{} counts for a {k}x{k} matrix",
                counts.len()
            )));
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::Empty("confusion matrix"));
        }
        Ok(Self { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    fn column_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|r| self.get(r, c)).sum()
    }

    fn row_sum(&self, r: usize) -> u64 {
        (0..self.k).map(|c| self.get(r, c)).sum()
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch {
            left: vec![y_true.len()],
            right: vec![y_pred.len()],
        });
    }
    if y_true.is_empty() {
        return Err(Error::Empty("label vectors"));
    }
    let mut counts = vec![0; k * k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::invalid(format!(
                "label pair ({t}, {p}) outside {k} classes"
            )));
        }
        counts[t * k + p] += 1;
    }
    ConfusionMatrix::from_counts(k, counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Scores of class 1 treated as the positive class.
    Binary,
    /// Unweighted mean over classes.
    Macro,
}

impl Averaging {
    pub fn for_classes(k: usize) -> Self {
        if k == 2 {
            Averaging::Binary
        } else {
            Averaging::Macro
        }
    }
}

/// Percentages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_scores(cm: &ConfusionMatrix, c: usize) -> ClassScores {
    let tp = cm.get(c, c);
    let p = ratio(tp, cm.column_sum(c));
    let r = ratio(tp, cm.row_sum(c));
    let f1 = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    ClassScores {
        precision: 100.0 * p,
        recall: 100.0 * r,
        f1: 100.0 * f1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassScores>,
}

/// Precision, recall and F1 in percent; `0/0` counts as 0. Macro F1 is the
/// mean of per-class F1 values.
pub fn prf1(cm: &ConfusionMatrix, averaging: Averaging) -> Result<Prf1> {
    let per_class: Vec<ClassScores> = (0..cm.k()).map(|c| class_scores(cm, c)).collect();
    let summary = match averaging {
        Averaging::Binary => {
            if cm.k() != 2 {
                return Err(Error::invalid(format!(
                    "binary averaging needs 2 classes, got {}",
                    cm.k()
                )));
            }
            per_class[1]
        }
        Averaging::Macro => {
            let k = per_class.len() as f64;
            ClassScores {
                precision: per_class.iter().map(|s| s.precision).sum::<f64>() / k,
                recall: per_class.iter().map(|s| s.recall).sum::<f64>() / k,
                f1: per_class.iter().map(|s| s.f1).sum::<f64>() / k,
            }
        }
    };
    Ok(Prf1 {
        precision: summary.precision,
        recall: summary.recall,
        f1: summary.f1,
        per_class,
    })
}

/// Accuracy in percent.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    100.0 * cm.trace() as f64 / cm.total() as f64
}

/// Mann-Whitney AUC with average ranks for ties, or `None` when either class
/// is absent.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * order[i..j].iter().filter(|&&o| positive[o]).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    /// Fraction in `[0, 1]`.
    pub value: f64,
    /// One-vs-rest AUC per class (`None` when undefined).
    pub per_class: Vec<Option<f64>>,
    /// Classes left out of the macro mean.
    pub excluded: Vec<usize>,
}

/// ROC-AUC from per-sample score rows. `Binary` reads the positive-class
/// probability from column 1 (or the only column); `Macro` averages
/// one-vs-rest AUCs over classes where both outcomes occur.
pub fn roc_auc(scores: &[Vec<f64>], y_true: &[usize], averaging: Averaging) -> Result<AucResult> {
    if scores.len() != y_true.len() {
        return Err(Error::ShapeMismatch {
            left: vec![scores.len()],
            right: vec![y_true.len()],
        });
    }
    let Some(width) = scores.first().map(Vec::len) else {
        return Err(Error::Empty("score rows"));
    };
    if width == 0 || scores.iter().any(|r| r.len() != width) {
        return Err(Error::invalid("score rows must share a non-zero width"));
    }
    match averaging {
        Averaging::Binary => {
            let col = if width == 1 { 0 } else { 1 };
            let s: Vec<f64> = scores.iter().map(|r| r[col]).collect();
            let pos: Vec<bool> = y_true.iter().map(|&y| y == 1).collect();
            let value = binary_auc(&s, &pos)
                .ok_or_else(|| Error::invalid("AUC undefined: a single class is present"))?;
            Ok(AucResult {
                value,
                per_class: vec![Some(value)],
                excluded: Vec::new(),
            })
        }
        Averaging::Macro => {
            let per_class: Vec<Option<f64>> = (0..width)
                .map(|c| {
                    let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                    let pos: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
                    binary_auc(&s, &pos)
                })
                .collect();
            let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
            if defined.is_empty() {
                return Err(Error::invalid("AUC undefined for every class"));
            }
            let excluded = per_class
                .iter()
                .enumerate()
                .filter(|(_, a)| a.is_none())
                .map(|(c, _)| c)
                .collect();
            Ok(AucResult {
                value: defined.iter().sum::<f64>() / defined.len() as f64,
                per_class,
                excluded,
            })
        }
    }
}

/// Table-style evaluation. Summary values are percentages at full precision;
/// rounding to two decimals happens only in [`MetricsReport::csv_row`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub roc_auc: f64,
    pub accuracy: f64,
    pub averaging: Averaging,
    pub per_class: Vec<ClassScores>,
    pub per_class_auc: Vec<Option<f64>>,
    /// Classes whose AUC was undefined and left out of the macro mean.
    pub auc_excluded: Vec<usize>,
    pub n: usize,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_scores(
        scores: &[Vec<f64>],
        y_true: &[usize],
        k: usize,
        averaging: Averaging,
    ) -> Result<Self> {
        let y_pred: Vec<usize> = scores
            .iter()
            .map(|r| crate::infotheory::argmax(r))
            .collect();
        let cm = confusion(y_true, &y_pred, k)?;
        let pr = prf1(&cm, averaging)?;
        let auc = roc_auc(scores, y_true, averaging)?;
        Ok(Self {
            precision: pr.precision,
            recall: pr.recall,
            f1: pr.f1,
            roc_auc: 100.0 * auc.value,
            accuracy: accuracy(&cm),
            averaging,
            per_class: pr.per_class,
            per_class_auc: auc.per_class,
            auc_excluded: auc.excluded,
            n: y_true.len(),
            confusion: cm,
        })
    }

    /// `strategy,dataset,P,R,F1,AUC,Acc` with two decimals.
    pub fn csv_row(&self, strategy: &str, dataset: &str) -> String {
        format!(
            "{strategy},{dataset},{:.2},{:.2},{:.2},{:.2},{:.2}",
            self.precision, self.recall, self.f1, self.roc_auc, self.accuracy
        )
    }
}

/// Evaluates `model` on `samples`; binary averaging for two classes, macro
/// otherwise.
pub fn report<P: Predictor + ?Sized>(model: &P, samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let k = model.num_classes();
    let scores = samples
        .iter()
        .map(|s| model.class_probabilities(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let y_true: Vec<usize> = samples.iter().map(|s| s.label).collect();
    MetricsReport::from_scores(&scores, &y_true, k, Averaging::for_classes(k))
}
