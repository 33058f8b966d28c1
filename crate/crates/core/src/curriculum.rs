//! Difficulty ordering, multi-level occlusion expansion and nested stages.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occlusion::{
    apply_mask, generate_areal_mask_with, generate_border_mask_for_level, occlusion_level, Mask,
    SizeRule,
};
use crate::tensor::{DenseArray, Rng};

/// Ring width of border occlusions.
pub const BORDER_WIDTH: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: DenseArray,
    pub label: usize,
    /// Occluded fraction of the mask that produced `image`.
    pub level: f64,
    pub origin_index: usize,
    pub level_index: usize,
}

impl Sample {
    /// Unoccluded sample.
    pub fn clean(image: DenseArray, label: usize, origin_index: usize) -> Self {
        Self {
            image,
            label,
            level: 0.0,
            origin_index,
            level_index: 0,
        }
    }
}

/// Difficulty score: the occluded fraction.
pub fn difficulty(sample: &Sample) -> f64 {
    sample.level
}

fn curriculum_order(a: &Sample, b: &Sample) -> Ordering {
    difficulty(a)
        .total_cmp(&difficulty(b))
        .then(a.origin_index.cmp(&b.origin_index))
        .then(a.level_index.cmp(&b.level_index))
}

/// Ascending difficulty, ties by `(origin_index, level_index)`.
pub fn order_dataset(mut samples: Vec<Sample>) -> Vec<Sample> {
    samples.sort_by(curriculum_order);
    samples
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionStrategy {
    /// Filled rectangle.
    Areal,
    /// Hollow rectangle of width [`BORDER_WIDTH`].
    Border,
}

/// Generates a mask of the given strategy at `level` for an `h×w` image.
pub fn strategy_mask(
    strategy: OcclusionStrategy,
    h: usize,
    w: usize,
    level: f64,
    rule: SizeRule,
    rng: &mut Rng,
) -> Result<Mask> {
    match strategy {
        OcclusionStrategy::Areal => generate_areal_mask_with(h, w, level, rule, rng),
        OcclusionStrategy::Border => {
            generate_border_mask_for_level(h, w, level, BORDER_WIDTH, rule, rng)
        }
    }
}

/// Occludes a clean sample at `target`, recording the achieved level.
pub fn occlude_sample(
    clean: &Sample,
    target: f64,
    level_index: usize,
    strategy: OcclusionStrategy,
    rule: SizeRule,
    rng: &mut Rng,
) -> Result<(Sample, Mask)> {
    let shape = clean.image.shape();
    if shape.len() < 2 {
        return Err(Error::invalid(format!(
            "sample image has shape {shape:?}, expected h×w[×c]"
        )));
    }
    let mask = strategy_mask(strategy, shape[0], shape[1], target, rule, rng)?;
    let image = apply_mask(&clean.image, &mask)?;
    let sample = Sample {
        image,
        label: clean.label,
        level: occlusion_level(&mask),
        origin_index: clean.origin_index,
        level_index,
    };
    Ok((sample, mask))
}

/// Default per-level occlusion: `j * max_level / delta`.
pub fn linear_levels(delta: usize, max_level: f64) -> impl Fn(usize) -> f64 {
    move |j| {
        if delta == 0 {
            0.0
        } else {
            j as f64 * max_level / delta as f64
        }
    }
}

/// Builds the multi-level dataset: `delta + 1` copies of every base sample,
/// copy `j` occluded at `level_of(j)`. Copy 0 is the sample itself.
///
/// Returns the samples together with the mask of every occluded copy.
pub fn expand_levels(
    base: &[Sample],
    delta: usize,
    level_of: &dyn Fn(usize) -> f64,
    strategy: OcclusionStrategy,
    rng: &mut Rng,
) -> Result<(Vec<Sample>, Vec<Mask>)> {
    let levels: Vec<f64> = (0..=delta).map(level_of).collect();
    if levels[0] != 0.0 {
        return Err(Error::invalid(format!(
            "level 0 must be unoccluded, got {}",
            levels[0]
        )));
    }
    if let Some(j) = levels.windows(2).position(|p| p[1] < p[0]) {
        return Err(Error::invalid(format!(
            "occlusion levels must be non-decreasing, level {} = {} < level {} = {}",
            j + 1,
            levels[j + 1],
            j,
            levels[j]
        )));
    }
    let mut samples = Vec::with_capacity(base.len() * (delta + 1));
    let mut masks = Vec::with_capacity(base.len() * delta);
    samples.extend(base.iter().cloned());
    for (j, &target) in levels.iter().enumerate().skip(1) {
        for s in base {
            let (occluded, mask) = occlude_sample(s, target, j, strategy, SizeRule::Nearest, rng)?;
            samples.push(occluded);
            masks.push(mask);
        }
    }
    Ok((samples, masks))
}

/// Number of samples in stage `t` (1-based) of `stages` over `n` samples:
/// `ceil(t * n / stages)`.
pub fn stage_size(t: usize, n: usize, stages: usize) -> usize {
    (t * n).div_ceil(stages)
}

/// Difficulty-ordered dataset split into nested stages.
#[derive(Clone, Debug)]
pub struct CurriculumSchedule {
    ordered: Vec<Sample>,
    stage_sizes: Vec<usize>,
}

impl CurriculumSchedule {
    pub fn new(samples: Vec<Sample>, stages: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("curriculum samples"));
        }
        if stages == 0 {
            return Err(Error::invalid("stage count must be at least 1"));
        }
        let ordered = order_dataset(samples);
        let n = ordered.len();
        let stage_sizes = (1..=stages).map(|t| stage_size(t, n, stages)).collect();
        Ok(Self {
            ordered,
            stage_sizes,
        })
    }

    pub fn stages(&self) -> usize {
        self.stage_sizes.len()
    }

    pub fn stage_sizes(&self) -> &[usize] {
        &self.stage_sizes
    }

    pub fn ordered(&self) -> &[Sample] {
        &self.ordered
    }

    pub fn len(&self) -> usize {
        self.ordered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered.is_empty()
    }

    /// Same samples, different stage count.
    pub fn with_stages(&self, stages: usize) -> Result<Self> {
        Self::new(self.ordered.clone(), stages)
    }

    /// Replaces the sample at ordered position `pos`, keeping its place in
    /// the schedule.
    pub(crate) fn replace(&mut self, pos: usize, sample: Sample) {
        self.ordered[pos] = sample;
    }

    /// Stage `t` (1-based): the first `n_t` ordered samples.
    pub fn stage_subset(&self, t: usize) -> Result<&[Sample]> {
        if t == 0 || t > self.stages() {
            return Err(Error::invalid(format!(
                "stage {t} outside 1..={}",
                self.stages()
            )));
        }
        Ok(&self.ordered[..self.stage_sizes[t - 1]])
    }

    /// Occlusion levels of stage `t`.
    pub fn stage_levels(&self, t: usize) -> Result<Vec<f64>> {
        Ok(self.stage_subset(t)?.iter().map(difficulty).collect())
    }

    /// Per-stage summary for logs.
    pub fn summary(&self) -> Vec<StageSummary> {
        (1..=self.stages())
            .map(|t| {
                let stage = &self.ordered[..self.stage_sizes[t - 1]];
                StageSummary {
                    stage: t,
                    size: stage.len(),
                    min_level: stage.iter().map(difficulty).fold(f64::INFINITY, f64::min),
                    max_level: stage
                        .iter()
                        .map(difficulty)
                        .fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub size: usize,
    pub min_level: f64,
    pub max_level: f64,
}
