//! Synthetic glyph tasks, PGM directory loading, stratified splits and
//! min-max normalization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::Sample;
use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Rng};

/// Smallest side length that still renders every glyph recognizably.
pub const MIN_IMAGE_SIDE: usize = 8;
pub const BACKGROUND: f64 = 0.2;
pub const FOREGROUND: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Glyph {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Hbar,
    Vbar,
    Saltire,
    Frame,
}

impl Glyph {
    pub const ALL: [Glyph; 10] = [
        Glyph::Disc,
        Glyph::Square,
        Glyph::Triangle,
        Glyph::Cross,
        Glyph::Ring,
        Glyph::Diamond,
        Glyph::Hbar,
        Glyph::Vbar,
        Glyph::Saltire,
        Glyph::Frame,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Glyph::Disc => "disc",
            Glyph::Square => "square",
            Glyph::Triangle => "triangle",
            Glyph::Cross => "cross",
            Glyph::Ring => "ring",
            Glyph::Diamond => "diamond",
            Glyph::Hbar => "hbar",
            Glyph::Vbar => "vbar",
            Glyph::Saltire => "saltire",
            Glyph::Frame => "frame",
        }
    }

    /// Integer rasterization: is offset `(dy, dx)` from the centre inside a
    /// glyph of radius `r`?
    fn covers(self, dy: i64, dx: i64, r: i64) -> bool {
        let (ay, ax) = (dy.abs(), dx.abs());
        if ay > r || ax > r {
            return false;
        }
        match self {
            Glyph::Disc => dy * dy + dx * dx <= r * r,
            Glyph::Square => 5 * ax <= 4 * r && 5 * ay <= 4 * r,
            Glyph::Triangle => 2 * ax <= dy + r,
            Glyph::Cross => 3 * ax <= r || 3 * ay <= r,
            Glyph::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && 4 * d2 >= r * r
            }
            Glyph::Diamond => ax + ay <= r,
            Glyph::Hbar => 3 * ay <= r,
            Glyph::Vbar => 3 * ax <= r,
            Glyph::Saltire => 3 * (ax - ay).abs() <= r,
            Glyph::Frame => 3 * ax.max(ay) >= 2 * r,
        }
    }
}

/// Parameters of a synthetic glyph classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub height: usize,
    pub width: usize,
    /// 1 (grayscale) or 3 (intensity replicated per channel).
    pub channels: usize,
    /// Classes; class `c` renders `Glyph::ALL[c]` unless `glyphs` is set.
    pub k: usize,
    #[serde(default)]
    pub glyphs: Option<Vec<Glyph>>,
    pub noise_sigma: f64,
    pub n: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            k: 4,
            glyphs: None,
            noise_sigma: 0.1,
            n: 400,
        }
    }
}

impl TaskSpec {
    pub fn class_glyphs(&self) -> Result<Vec<Glyph>> {
        let glyphs = match &self.glyphs {
            Some(g) => g.clone(),
            None => Glyph::ALL.iter().copied().take(self.k).collect(),
        };
        if glyphs.len() != self.k {
            return Err(Error::invalid(format!(
                "{} glyphs for {} classes",
                glyphs.len(),
                self.k
            )));
        }
        Ok(glyphs)
    }

    pub fn image_shape(&self) -> Vec<usize> {
        if self.channels == 1 {
            vec![self.height, self.width]
        } else {
            vec![self.height, self.width, self.channels]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_IMAGE_SIDE || self.width < MIN_IMAGE_SIDE {
            return Err(Error::invalid(format!(
                "image {}x{} too small for glyphs (minimum {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE})",
                self.height, self.width
            )));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::invalid(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if !(2..=Glyph::ALL.len()).contains(&self.k) {
            return Err(Error::invalid(format!(
                "k must be in 2..=10, got {}",
                self.k
            )));
        }
        if self.n < self.k {
            return Err(Error::invalid(format!(
                "n = {} is smaller than k = {}",
                self.n, self.k
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        self.class_glyphs().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: SplitTag,
}

impl LabeledDataset {
    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

fn render(glyph: Glyph, spec: &TaskSpec, rng: &mut Rng) -> Result<DenseArray> {
    let (h, w) = (spec.height as i64, spec.width as i64);
    let side = h.min(w);
    // radius in [1/4, 3/8] of the short side; centre within ±side/16 of the
    // image centre, clamped so the glyph stays inside
    let r_lo = (side / 4).max(2);
    let r_hi = (3 * side / 8).max(r_lo);
    let r = r_lo + rng.below((r_hi - r_lo + 1) as usize) as i64;
    let jitter = side / 16;
    let mut offset = || rng.below((2 * jitter + 1) as usize) as i64 - jitter;
    let cy = (h / 2 + offset()).clamp(r, (h - 1 - r).max(r));
    let cx = (w / 2 + offset()).clamp(r, (w - 1 - r).max(r));
    let mut pixels = Vec::with_capacity((h * w) as usize * spec.channels);
    for y in 0..h {
        for x in 0..w {
            let base = if glyph.covers(y - cy, x - cx, r) {
                FOREGROUND
            } else {
                BACKGROUND
            };
            let v = if spec.noise_sigma > 0.0 {
                (base + rng.normal(0.0, spec.noise_sigma)).clamp(0.0, 1.0)
            } else {
                base
            };
            pixels.extend(std::iter::repeat_n(v, spec.channels));
        }
    }
    DenseArray::new(spec.image_shape(), pixels)
}

/// Sample `i` has label `i mod k`, so classes are balanced within one.
pub fn generate_synthetic(spec: &TaskSpec, rng: &mut Rng) -> Result<LabeledDataset> {
    spec.validate()?;
    let glyphs = spec.class_glyphs()?;
    let samples = (0..spec.n)
        .map(|i| {
            let label = i % spec.k;
            Ok(Sample::clean(render(glyphs[label], spec, rng)?, label, i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        samples,
        class_names: glyphs.iter().map(|g| g.name().to_string()).collect(),
        split: SplitTag::All,
    })
}

/// Decoded PGM: row-major intensities scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

fn pgm_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Parses a binary (P5) PGM with 8- or 16-bit samples.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_error(path, "truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| pgm_error(path, "non-ASCII header"))?,
        );
    }
    if fields[0] != "P5" {
        return Err(pgm_error(
            path,
            format!("unsupported magic {:?}, expected P5", fields[0]),
        ));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| pgm_error(path, format!("bad {what} {s:?}")))
    };
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(pgm_error(path, "zero image extent"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(pgm_error(
            path,
            format!("maxval {maxval} outside 1..=65535"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let needed = width * height * bytes_per;
    let raster = bytes.get(pos..pos + needed).ok_or_else(|| {
        pgm_error(
            path,
            format!(
                "raster has {} bytes, expected {needed}",
                bytes.len().saturating_sub(pos)
            ),
        )
    })?;
    let scale = maxval as f64;
    let pixels = if bytes_per == 1 {
        raster
            .iter()
            .map(|&b| (b as f64 / scale).min(1.0))
            .collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0))
            .collect()
    };
    Ok(Pgm {
        height,
        width,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

/// Writes an 8-bit P5 PGM. Multi-channel images are averaged per pixel.
pub fn write_pgm(path: &Path, image: &DenseArray) -> Result<()> {
    let shape = image.shape();
    if !(shape.len() == 2 || shape.len() == 3) {
        return Err(Error::invalid(format!(
            "cannot write shape {shape:?} as PGM"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let c = if shape.len() == 3 { shape[2] } else { 1 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().chunks(c).map(|px| {
        let v = px.iter().sum::<f64>() / c as f64;
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbour resampling of a row-major grid.
pub fn resize_nearest(pixels: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = (y * h) / out_h;
        for x in 0..out_w {
            out.push(pixels[sy * w + (x * w) / out_w]);
        }
    }
    out
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `root/<class>/*.pgm`. Class indices follow the sorted subdirectory
/// names; images are resized to `height × width` and scaled to `[0, 1]`.
pub fn load_directory(root: &Path, height: usize, width: usize) -> Result<LabeledDataset> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("target image size must be positive"));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.len() < 2 {
        return Err(Error::invalid(format!(
            "{}: need at least two class subdirectories, found {}",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::with_capacity(class_dirs.len());
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        if files.is_empty() {
            return Err(pgm_error(dir, "class directory contains no .pgm files"));
        }
        for file in files {
            let pgm = read_pgm(&file)?;
            let pixels = resize_nearest(&pgm.pixels, pgm.height, pgm.width, height, width);
            let origin = samples.len();
            samples.push(Sample::clean(
                DenseArray::new(vec![height, width], pixels)?,
                label,
                origin,
            ));
        }
    }
    Ok(LabeledDataset {
        samples,
        class_names,
        split: SplitTag::All,
    })
}

/// Stratified split by class. Each class's samples are shuffled, the first
/// `round(f_train·n_c)` go to train, the next `round(f_val·n_c)` to val and
/// the rest to test; every split is returned in origin order.
pub fn split(
    ds: &LabeledDataset,
    fractions: (f64, f64, f64),
    rng: &mut Rng,
) -> Result<[LabeledDataset; 3]> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(Error::invalid(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions sum to {}, expected 1",
            ft + fv + fs
        )));
    }
    let mut parts: [Vec<Sample>; 3] = Default::default();
    for class in 0..ds.k() {
        let mut members: Vec<&Sample> = ds.samples.iter().filter(|s| s.label == class).collect();
        rng.shuffle(&mut members);
        let n = members.len();
        let n_train = ((ft * n as f64).round() as usize).min(n);
        let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
        let counts = [n_train, n_val, n - n_train - n_val];
        for (tag, count) in ["train", "val", "test"].iter().zip(counts) {
            if count == 0 {
                return Err(Error::invalid(format!(
                    "{tag} split receives no samples of class {class} ({n} available)"
                )));
            }
        }
        let mut rest = members.into_iter();
        for (part, count) in parts.iter_mut().zip(counts) {
            part.extend(rest.by_ref().take(count).cloned());
        }
    }
    let make = |mut samples: Vec<Sample>, split: SplitTag| {
        samples.sort_by_key(|s| (s.origin_index, s.level_index));
        LabeledDataset {
            samples,
            class_names: ds.class_names.clone(),
            split,
        }
    };
    let [train, val, test] = parts;
    Ok([
        make(train, SplitTag::Train),
        make(val, SplitTag::Val),
        make(test, SplitTag::Test),
    ])
}

/// Affine intensity map `x ↦ (x − lo) / (hi − lo)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub lo: f64,
    pub hi: f64,
    /// Source data was constant; every pixel maps to 0.
    pub degenerate: bool,
}

impl NormParams {
    pub fn apply(&self, x: f64) -> f64 {
        if self.degenerate {
            0.0
        } else {
            (x - self.lo) / (self.hi - self.lo)
        }
    }
}

/// Min-max parameters of `ds`. Data already inside `[0, 1]` keeps the
/// identity map `(0, 1)`.
pub fn fit_normalization(ds: &LabeledDataset) -> Result<NormParams> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in ds.samples.iter().flat_map(|s| s.image.data()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        return Err(Error::Empty("dataset pixels"));
    }
    if hi == lo {
        return Ok(NormParams {
            lo,
            hi,
            degenerate: true,
        });
    }
    if lo >= 0.0 && hi <= 1.0 {
        return Ok(NormParams {
            lo: 0.0,
            hi: 1.0,
            degenerate: false,
        });
    }
    Ok(NormParams {
        lo,
        hi,
        degenerate: false,
    })
}

/// Applies previously fitted parameters (e.g. train-set ones to a test set).
pub fn apply_normalization(ds: &LabeledDataset, params: &NormParams) -> Result<LabeledDataset> {
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            Ok(Sample {
                image: s.image.map(|v| params.apply(v))?,
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        samples,
        class_names: ds.class_names.clone(),
        split: ds.split,
    })
}

/// Fits min-max parameters on `ds` and applies them.
pub fn normalize(ds: &LabeledDataset) -> Result<(LabeledDataset, NormParams)> {
    let params = fit_normalization(ds)?;
    Ok((apply_normalization(ds, &params)?, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub split: SplitTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `root/<class>/<origin:05>.pgm` for every sample of every split,
/// plus `root/manifest.json`.
pub fn write_tree(root: &Path, splits: &[&LabeledDataset]) -> Result<Manifest> {
    let Some(first) = splits.first() else {
        return Err(Error::Empty("dataset splits"));
    };
    let class_names = first.class_names.clone();
    for name in &class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::new();
    for ds in splits {
        for s in &ds.samples {
            let rel = format!("{}/{:05}.pgm", class_names[s.label], s.origin_index);
            write_pgm(&root.join(&rel), &s.image)?;
            entries.push(ManifestEntry {
                path: rel,
                label: s.label,
                split: ds.split,
            });
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        class_names,
        entries,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
