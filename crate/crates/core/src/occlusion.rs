//! Binary occlusion masks, their application to images, and occlusion
//! histograms over sets of samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Rng};

/// Allowed deviation between the requested and the achieved occluded
/// fraction of an areal mask.
pub const AREAL_TOLERANCE: f64 = 0.02;
const MAX_ATTEMPTS: usize = 100;
const ASPECT_RANGE: (f64, f64) = (0.5, 2.0);

/// Binary visibility grid: 1 = visible, 0 = occluded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn visible(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn occluded(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch {
                left: vec![height, width],
                right: vec![bits.len()],
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }

    pub fn zero_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    /// `(row, col)` of every occluded pixel, row-major.
    pub fn zero_coords(&self) -> Vec<[usize; 2]> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 0)
            .map(|(i, _)| [i / self.width, i % self.width])
            .collect()
    }

    fn fill_rect(&mut self, top: usize, left: usize, rows: usize, cols: usize) {
        for r in top..top + rows {
            let start = r * self.width + left;
            self.bits[start..start + cols].fill(0);
        }
    }
}

/// Fraction of occluded pixels, in `[0, 1]`.
pub fn occlusion_level(mask: &Mask) -> f64 {
    if mask.bits.is_empty() {
        return 0.0;
    }
    mask.zero_count() as f64 / mask.bits.len() as f64
}

/// How a requested occluded area is turned into integer rectangle sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeRule {
    /// Closest achievable area.
    Nearest,
    /// Largest achievable area not exceeding the request.
    AtMost,
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "mask dimensions must be positive, got {h}x{w}"
        )));
    }
    Ok(())
}

fn check_fraction(target: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::invalid(format!(
            "occlusion fraction {target} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Rectangle sides `(rows, cols)` for `area` pixels at the given aspect
/// (rows / cols). The flag reports whether the sides had to be clipped to the
/// image.
fn rect_sides(h: usize, w: usize, area: f64, aspect: f64, rule: SizeRule) -> (usize, usize, bool) {
    let round = |v: f64| match rule {
        SizeRule::Nearest => v.round(),
        SizeRule::AtMost => v.floor(),
    };
    let ideal_rows = (area * aspect).sqrt().round();
    let mut clipped = ideal_rows > h as f64;
    let rows = (ideal_rows as usize).clamp(1, h);
    let ideal_cols = round(area / rows as f64);
    if ideal_cols > w as f64 {
        clipped = true;
        let rows = (round(area / w as f64) as usize).min(h);
        return (rows, w, clipped);
    }
    (rows, ideal_cols as usize, clipped)
}

/// Areal occlusion: one filled axis-aligned rectangle whose area matches
/// `target_fraction` of the image.
pub fn generate_areal_mask(
    h: usize,
    w: usize,
    target_fraction: f64,
    rng: &mut Rng,
) -> Result<Mask> {
    generate_areal_mask_with(h, w, target_fraction, SizeRule::Nearest, rng)
}

pub fn generate_areal_mask_with(
    h: usize,
    w: usize,
    target_fraction: f64,
    rule: SizeRule,
    rng: &mut Rng,
) -> Result<Mask> {
    check_dims(h, w)?;
    check_fraction(target_fraction)?;
    if target_fraction == 0.0 {
        return Ok(Mask::visible(h, w));
    }
    let total = (h * w) as f64;
    let area = target_fraction * total;
    let mut best: Option<(f64, usize, usize)> = None;
    for _ in 0..MAX_ATTEMPTS {
        let aspect = rng.uniform(ASPECT_RANGE.0, ASPECT_RANGE.1)?;
        let (rows, cols, clipped) = rect_sides(h, w, area, aspect, rule);
        let err = (area - (rows * cols) as f64).abs() / total;
        if best.is_none_or(|(e, _, _)| err < e) {
            best = Some((err, rows, cols));
        }
        if !clipped && err <= AREAL_TOLERANCE {
            break;
        }
    }
    let (_, rows, cols) = best.expect("at least one attempt");
    let mut mask = Mask::visible(h, w);
    if rows > 0 && cols > 0 {
        let top = rng.below(h - rows + 1);
        let left = rng.below(w - cols + 1);
        mask.fill_rect(top, left, rows, cols);
    }
    Ok(mask)
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Self {
            top,
            left,
            bottom,
            right,
        }
    }
}

/// Hollow rectangle: zeros on the ring of `border_width` pixels that starts at
/// the rectangle boundary and grows inward. Rings at least half as wide as
/// the rectangle degenerate to a filled rectangle.
pub fn generate_border_mask(h: usize, w: usize, rect: Rect, border_width: usize) -> Result<Mask> {
    check_dims(h, w)?;
    if border_width == 0 {
        return Err(Error::invalid("border width must be at least 1"));
    }
    if rect.top > rect.bottom || rect.left > rect.right || rect.bottom >= h || rect.right >= w {
        return Err(Error::invalid(format!(
            "rectangle {rect:?} is not inside a {h}x{w} image"
        )));
    }
    let mut mask = Mask::visible(h, w);
    for r in rect.top..=rect.bottom {
        for c in rect.left..=rect.right {
            let inset = (r - rect.top)
                .min(rect.bottom - r)
                .min(c - rect.left)
                .min(rect.right - c);
            if inset < border_width {
                mask.bits[r * w + c] = 0;
            }
        }
    }
    Ok(mask)
}

fn ring_area(rows: usize, cols: usize, width: usize) -> usize {
    if rows <= 2 * width || cols <= 2 * width {
        rows * cols
    } else {
        rows * cols - (rows - 2 * width) * (cols - 2 * width)
    }
}

/// Border occlusion at a requested level: picks uniformly among the
/// rectangle sizes (aspect within [0.5, 2]) whose ring area is closest to the
/// target, then places it uniformly. A fixed ring width bounds the largest
/// reachable level, so the achieved level may fall short of large targets.
pub fn generate_border_mask_for_level(
    h: usize,
    w: usize,
    target_fraction: f64,
    border_width: usize,
    rule: SizeRule,
    rng: &mut Rng,
) -> Result<Mask> {
    check_dims(h, w)?;
    check_fraction(target_fraction)?;
    if border_width == 0 {
        return Err(Error::invalid("border width must be at least 1"));
    }
    if target_fraction == 0.0 {
        return Ok(Mask::visible(h, w));
    }
    let area = target_fraction * (h * w) as f64;
    let mut best_err = f64::INFINITY;
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for rows in 1..=h {
        for cols in 1..=w {
            let aspect = rows as f64 / cols as f64;
            if !(ASPECT_RANGE.0..=ASPECT_RANGE.1).contains(&aspect) {
                continue;
            }
            let ring = ring_area(rows, cols, border_width) as f64;
            if rule == SizeRule::AtMost && ring > area {
                continue;
            }
            let err = (ring - area).abs();
            if err < best_err {
                best_err = err;
                candidates.clear();
            }
            if err == best_err {
                candidates.push((rows, cols));
            }
        }
    }
    if candidates.is_empty() {
        return Ok(Mask::visible(h, w));
    }
    let (rows, cols) = candidates[rng.below(candidates.len())];
    let top = rng.below(h - rows + 1);
    let left = rng.below(w - cols + 1);
    generate_border_mask(
        h,
        w,
        Rect::new(top, left, top + rows - 1, left + cols - 1),
        border_width,
    )
}

/// `image ⊙ mask`. The image is `h×w` or `h×w×c`; occluded pixels become
/// exactly `0.0` in every channel.
pub fn apply_mask(image: &DenseArray, mask: &Mask) -> Result<DenseArray> {
    let shape = image.shape();
    let spatial_ok = shape.len() >= 2 && shape[0] == mask.height && shape[1] == mask.width;
    if !spatial_ok || shape.len() > 3 {
        return Err(Error::ShapeMismatch {
            left: shape.to_vec(),
            right: vec![mask.height, mask.width],
        });
    }
    let channels = shape.get(2).copied().unwrap_or(1);
    let data = image
        .data()
        .chunks(channels)
        .zip(&mask.bits)
        .flat_map(|(px, &bit)| px.iter().map(move |&v| if bit == 1 { v } else { 0.0 }))
        .collect();
    DenseArray::new(shape.to_vec(), data)
}

/// Discrete distribution over `b` equal-width occlusion bins on `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    masses: Vec<f64>,
    edges: Vec<f64>,
}

/// Tolerance on total mass accepted by [`Histogram::from_masses`].
pub const MASS_TOLERANCE: f64 = 1e-9;

impl Histogram {
    /// Uniform-edge histogram from explicit masses.
    pub fn from_masses(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() {
            return Err(Error::Empty("histogram bins"));
        }
        if let Some(m) = masses.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
            return Err(Error::invalid(format!(
                "histogram mass {m} is not a non-negative number"
            )));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::invalid(format!(
                "histogram masses sum to {total}, not 1"
            )));
        }
        let b = masses.len();
        Ok(Self {
            masses,
            edges: uniform_edges(b),
        })
    }

    /// Normalizes non-negative weights into a histogram.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("weights must have positive total"));
        }
        Self::from_masses(weights.iter().map(|w| w / total).collect())
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bins(&self) -> usize {
        self.masses.len()
    }
}

fn uniform_edges(b: usize) -> Vec<f64> {
    (0..=b).map(|i| i as f64 / b as f64).collect()
}

/// Bin of `level` among `b` uniform bins: right-open except the last.
pub fn bin_index(level: f64, b: usize) -> usize {
    ((level * b as f64).floor() as usize).min(b - 1)
}

/// Normalized histogram of occlusion levels over `b` uniform bins.
pub fn occlusion_histogram(levels: &[f64], b: usize) -> Result<Histogram> {
    if levels.is_empty() {
        return Err(Error::Empty("occlusion levels"));
    }
    if b == 0 {
        return Err(Error::invalid("bin count must be at least 1"));
    }
    if let Some(l) = levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::invalid(format!(
            "occlusion level {l} outside [0, 1]"
        )));
    }
    let mut counts = vec![0usize; b];
    for &l in levels {
        counts[bin_index(l, b)] += 1;
    }
    let n = levels.len() as f64;
    Histogram::from_masses(counts.into_iter().map(|c| c as f64 / n).collect())
}
