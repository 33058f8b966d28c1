//! Shannon entropy, plug-in mutual information between true and predicted
//! labels, and MI-driven occlusion level selection.
//!
//! All logarithms are base 2.

use serde::{Deserialize, Serialize};

use crate::curriculum::{occlude_sample, OcclusionStrategy, Sample};
use crate::error::{Error, Result};
use crate::occlusion::SizeRule;
use crate::tensor::{DenseArray, Rng};

/// Two MI values closer than this count as a tie.
const MI_TIE: f64 = 1e-12;

/// Anything that maps an image to class probabilities.
pub trait Predictor {
    fn num_classes(&self) -> usize;

    /// One probability per class, `num_classes()` entries.
    fn class_probabilities(&self, image: &DenseArray) -> Result<Vec<f64>>;

    /// Index of the largest probability; the first one on ties.
    fn predict_class(&self, image: &DenseArray) -> Result<usize> {
        let probs = self.class_probabilities(image)?;
        Ok(argmax(&probs))
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Entropy in bits with `0 log 0 = 0`.
pub fn entropy(masses: &[f64]) -> Result<f64> {
    if let Some(m) = masses.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
        return Err(Error::invalid(format!(
            "probability mass {m} is negative or not finite"
        )));
    }
    let total: f64 = masses.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "probability masses sum to {total}, not 1"
        )));
    }
    Ok(sum_canonical(
        masses
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .collect(),
    ))
}

/// Sums in ascending order so the result does not depend on input order.
fn sum_canonical(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// `k×k` contingency table; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointCounts {
    k: usize,
    table: Vec<u64>,
}

impl JointCounts {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            table: vec![0; k * k],
        }
    }

    pub fn from_table(k: usize, table: Vec<u64>) -> Result<Self> {
        if table.len() != k * k {
            return Err(Error::ShapeMismatch {
                left: vec![k, k],
                right: vec![table.len()],
            });
        }
        Ok(Self { k, table })
    }

    pub fn from_labels(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::ShapeMismatch {
                left: vec![truth.len()],
                right: vec![predicted.len()],
            });
        }
        let mut counts = Self::new(k);
        for (&y, &p) in truth.iter().zip(predicted) {
            counts.record(y, p)?;
        }
        Ok(counts)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.k || predicted >= self.k {
            return Err(Error::invalid(format!(
                "label pair ({truth}, {predicted}) outside {} classes",
                self.k
            )));
        }
        self.table[truth * self.k + predicted] += 1;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.table[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.table.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let k = self.k;
        let table = (0..k * k).map(|idx| self.get(idx % k, idx / k)).collect();
        Self { k, table }
    }

    fn row_totals(&self) -> Vec<u64> {
        self.table.chunks(self.k).map(|r| r.iter().sum()).collect()
    }

    fn col_totals(&self) -> Vec<u64> {
        (0..self.k)
            .map(|j| (0..self.k).map(|i| self.get(i, j)).sum())
            .collect()
    }

    fn check_nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Empty("joint counts")),
            n => Ok(n as f64),
        }
    }

    /// Marginal distribution of the true labels.
    pub fn truth_marginal(&self) -> Result<Vec<f64>> {
        let n = self.check_nonempty()?;
        Ok(self
            .row_totals()
            .into_iter()
            .map(|c| c as f64 / n)
            .collect())
    }

    /// Marginal distribution of the predicted labels.
    pub fn predicted_marginal(&self) -> Result<Vec<f64>> {
        let n = self.check_nonempty()?;
        Ok(self
            .col_totals()
            .into_iter()
            .map(|c| c as f64 / n)
            .collect())
    }
}

/// Plug-in `I(Y; Ŷ)` in bits.
///
/// Each cell term depends only on its count and the two marginals, and the
/// terms are summed in sorted order, so transposing the table gives a
/// bit-identical result.
pub fn mutual_information(joint: &JointCounts) -> Result<f64> {
    let n = joint.check_nonempty()?;
    let rows = joint.row_totals();
    let cols = joint.col_totals();
    let k = joint.k;
    let mut terms = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let c = joint.get(i, j);
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            let indep = (rows[i] as f64 / n) * (cols[j] as f64 / n);
            terms.push(pij * (pij / indep).log2());
        }
    }
    Ok(sum_canonical(terms))
}

/// `H(Y | Ŷ)` in bits.
pub fn conditional_entropy(joint: &JointCounts) -> Result<f64> {
    let n = joint.check_nonempty()?;
    let cols = joint.col_totals();
    let k = joint.k;
    let mut terms = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let c = joint.get(i, j);
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            let pj = cols[j] as f64 / n;
            terms.push(-pij * (pij / pj).log2());
        }
    }
    Ok(sum_canonical(terms))
}

/// Search space of the MI-driven occlusion selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IalConfig {
    /// Largest occlusion fraction any selected mask may have.
    pub alpha: f64,
    pub candidate_levels: Vec<f64>,
    /// Number of probe samples scored per candidate.
    pub probe_size: usize,
}

impl IalConfig {
    /// Evenly spaced grid `{0, α/(m−1), …, α}` with `m` points.
    pub fn evenly_spaced(alpha: f64, points: usize, probe_size: usize) -> Result<Self> {
        if points == 0 {
            return Err(Error::Empty("candidate level grid"));
        }
        let candidate_levels = if points == 1 {
            vec![alpha]
        } else {
            (0..points)
                .map(|i| alpha * i as f64 / (points - 1) as f64)
                .collect()
        };
        let cfg = Self {
            alpha,
            candidate_levels,
            probe_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.candidate_levels.is_empty() {
            return Err(Error::Empty("candidate level grid"));
        }
        if let Some(l) = self
            .candidate_levels
            .iter()
            .find(|l| !(0.0..=self.alpha).contains(*l))
        {
            return Err(Error::invalid(format!(
                "candidate level {l} outside [0, alpha = {}]",
                self.alpha
            )));
        }
        if self.probe_size == 0 {
            return Err(Error::invalid("probe size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSelection {
    pub level: f64,
    pub mi: f64,
    /// `(candidate, MI)` in candidate order.
    pub evaluations: Vec<(f64, f64)>,
}

/// MI between labels and predictions of `model` on `probe` occluded at
/// `level`. Masks never exceed `level`.
pub fn probe_mutual_information<P: Predictor + ?Sized>(
    model: &P,
    probe: &[Sample],
    level: f64,
    strategy: OcclusionStrategy,
    rng: &mut Rng,
) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::Empty("probe samples"));
    }
    let mut joint = JointCounts::new(model.num_classes());
    for sample in probe {
        let (occluded, _) = occlude_sample(
            sample,
            level,
            sample.level_index,
            strategy,
            SizeRule::AtMost,
            rng,
        )?;
        joint.record(sample.label, model.predict_class(&occluded.image)?)?;
    }
    mutual_information(&joint)
}

/// Occlusion level in the candidate grid that maximizes `I(Y; Ŷ)` on the
/// probe set. Ties go to the larger level.
///
/// Candidate `c` draws its masks from `rng.fork(c)`, so the outcome does not
/// depend on evaluation order.
pub fn select_occlusion_level<P: Predictor + ?Sized>(
    model: &P,
    probe: &[Sample],
    cfg: &IalConfig,
    strategy: OcclusionStrategy,
    rng: &Rng,
) -> Result<LevelSelection> {
    cfg.validate()?;
    if probe.is_empty() {
        return Err(Error::Empty("probe samples"));
    }
    let probe = &probe[..probe.len().min(cfg.probe_size)];
    let mut evaluations = Vec::with_capacity(cfg.candidate_levels.len());
    for (c, &level) in cfg.candidate_levels.iter().enumerate() {
        let mut fork = rng.fork(c as u64);
        let mi = probe_mutual_information(model, probe, level, strategy, &mut fork)?;
        evaluations.push((level, mi));
    }
    let (mut level, mut mi) = evaluations[0];
    for &(l, m) in &evaluations[1..] {
        let tie = (m - mi).abs() <= MI_TIE;
        if (tie && l > level) || (!tie && m > mi) {
            level = l;
            mi = m;
        }
    }
    Ok(LevelSelection {
        level,
        mi,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.125; 8]).unwrap(), 3.0);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(entropy(&[0.5, 0.25, 0.25]).unwrap(), 1.5);
        assert!(entropy(&[-0.1, 1.1]).is_err());
        assert!(entropy(&[0.3, 0.3]).is_err());
    }

    #[test]
    fn mi_examples() {
        // independent: outer product of marginals [1,3] and [2,2]
        let indep = JointCounts::from_table(2, vec![2, 2, 6, 6]).unwrap();
        assert_eq!(mutual_information(&indep).unwrap(), 0.0);

        let mut diag = JointCounts::new(4);
        for c in 0..4 {
            for _ in 0..5 {
                diag.record(c, c).unwrap();
            }
        }
        assert_eq!(mutual_information(&diag).unwrap(), 2.0);
        assert_eq!(conditional_entropy(&diag).unwrap(), 0.0);

        let h_y = entropy(&indep.truth_marginal().unwrap()).unwrap();
        assert!((conditional_entropy(&indep).unwrap() - h_y).abs() < 1e-15);
    }

    #[test]
    fn mi_symmetric_under_transpose() {
        let j = JointCounts::from_table(3, vec![5, 1, 0, 2, 7, 3, 0, 4, 9]).unwrap();
        assert_eq!(
            mutual_information(&j).unwrap().to_bits(),
            mutual_information(&j.transpose()).unwrap().to_bits()
        );
    }

    #[test]
    fn empty_joint_is_an_error() {
        assert!(mutual_information(&JointCounts::new(3)).is_err());
        assert!(JointCounts::new(2).record(2, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = IalConfig::evenly_spaced(0.4, 3, 10).unwrap();
        assert_eq!(cfg.candidate_levels, vec![0.0, 0.2, 0.4]);
        let bad = IalConfig {
            alpha: 0.3,
            candidate_levels: vec![0.0, 0.4],
            probe_size: 5,
        };
        assert!(bad.validate().is_err());
        assert!(IalConfig::evenly_spaced(0.3, 0, 5).is_err());
    }
}
