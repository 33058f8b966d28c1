//! Dense classifier with hand-derived backpropagation, plain SGD, the
//! composite curriculum objectives and staged training.
//!
//! Only cross-entropy is differentiated. The Wasserstein, mutual-information
//! and geodesic terms do not depend on the current parameters; they are
//! computed per stage, reported in the composite value, and act on the
//! schedule (transition diagnostics, occlusion level selection).

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::curriculum::{
    difficulty, occlude_sample, CurriculumSchedule, OcclusionStrategy, Sample,
};
use crate::error::{Error, Result};
use crate::geometry::{
    estimate_rate, geodesic_distance, ConvergenceTrace, Euclidean, Integrator, MetricField,
    ShootingConfig, DEFAULT_FD_STEP,
};
use crate::infotheory::{
    probe_mutual_information, select_occlusion_level, IalConfig, LevelSelection, Predictor,
};
use crate::occlusion::{Mask, SizeRule};
use crate::tensor::{DenseArray, Rng, RngState};
use crate::transport::stage_transition_distance;

/// Probabilities are clipped to `[PROB_CLIP, 1 − PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-12;
const EIGEN_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            fan_in,
            fan_out,
            activation,
        }
    }

    fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// `input → 64 relu → 32 relu → head`; the head is one sigmoid unit for two
/// classes and a softmax over `classes` otherwise.
pub fn default_layers(input: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(input, 64, Activation::Relu),
        LayerSpec::new(64, 32, Activation::Relu),
        head_layer(32, classes),
    ]
}

pub fn head_layer(fan_in: usize, classes: usize) -> LayerSpec {
    if classes == 2 {
        LayerSpec::new(fan_in, 1, Activation::Sigmoid)
    } else {
        LayerSpec::new(fan_in, classes, Activation::Softmax)
    }
}

fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    let Some(last) = layers.last() else {
        return Err(Error::Empty("layer spec"));
    };
    for (i, l) in layers.iter().enumerate() {
        if l.fan_in == 0 || l.fan_out == 0 {
            return Err(Error::invalid(format!("layer {i} has a zero extent")));
        }
        if i + 1 < layers.len() {
            if l.activation == Activation::Softmax {
                return Err(Error::invalid(format!(
                    "softmax is only allowed on the head, found on layer {i}"
                )));
            }
            if l.fan_out != layers[i + 1].fan_in {
                return Err(Error::invalid(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    l.fan_out,
                    i + 1,
                    layers[i + 1].fan_in
                )));
            }
        }
    }
    match last.activation {
        Activation::Sigmoid if last.fan_out == 1 => Ok(()),
        Activation::Softmax if last.fan_out >= 2 => Ok(()),
        _ => Err(Error::invalid(
            "head must be a single sigmoid unit or a softmax over at least two classes",
        )),
    }
}

/// Network architecture plus flat parameters. Layer `l` stores its weights
/// row-major as `fan_out × fan_in`, followed by its `fan_out` biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
    step_count: u64,
}

/// Per-layer pre-activations and activations of one forward pass.
struct Trace {
    /// `activations[0]` is the input; `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn activate(kind: Activation, z: &[f64]) -> Vec<f64> {
    match kind {
        Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
        Activation::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
        Activation::Softmax => softmax(z),
    }
}

impl ModelState {
    /// He-style uniform weights `U(±√(6/fan_in))`, zero biases.
    pub fn init(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_layers(&layers)?;
        let mut rng = Rng::new(seed);
        let mut params = Vec::with_capacity(layers.iter().map(LayerSpec::param_count).sum());
        for l in &layers {
            let bound = (6.0 / l.fan_in as f64).sqrt();
            for _ in 0..l.fan_in * l.fan_out {
                params.push(rng.uniform(-bound, bound)?);
            }
            params.extend(std::iter::repeat_n(0.0, l.fan_out));
        }
        Ok(Self {
            layers,
            params,
            step_count: 0,
        })
    }

    pub fn from_parts(layers: Vec<LayerSpec>, params: Vec<f64>, step_count: u64) -> Result<Self> {
        validate_layers(&layers)?;
        let expected: usize = layers.iter().map(LayerSpec::param_count).sum();
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "layer spec needs {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(Self {
            layers,
            params,
            step_count,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].fan_in
    }

    fn head(&self) -> &LayerSpec {
        self.layers.last().expect("validated non-empty")
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            off.push(acc);
            acc += l.param_count();
        }
        off
    }

    /// Offset of the head layer inside `params`.
    pub fn head_offset(&self) -> usize {
        *self.offsets().last().expect("validated non-empty")
    }

    pub fn head_param_count(&self) -> usize {
        self.head().param_count()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_size() {
            return Err(Error::ShapeMismatch {
                left: vec![self.input_size()],
                right: vec![x.len()],
            });
        }
        Ok(())
    }

    fn affine(&self, layer: usize, offset: usize, x: &[f64]) -> Vec<f64> {
        let l = &self.layers[layer];
        let (w, rest) = self.params[offset..].split_at(l.fan_in * l.fan_out);
        let b = &rest[..l.fan_out];
        w.chunks(l.fan_in)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
            .collect()
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let offsets = self.offsets();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let z = self.affine(i, offsets[i], &activations[i]);
            activations.push(activate(l.activation, &z));
            pre.push(z);
        }
        Trace { activations, pre }
    }

    /// Output of the head: `k` softmax probabilities, or the single sigmoid
    /// probability of the positive class.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).activations.pop().expect("at least one layer"))
    }

    /// Activations feeding the head layer.
    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let offsets = self.offsets();
        let mut a = x.to_vec();
        for (i, l) in self.layers[..self.layers.len() - 1].iter().enumerate() {
            a = activate(l.activation, &self.affine(i, offsets[i], &a));
        }
        Ok(a)
    }

    /// Target vector matching [`ModelState::forward`]'s layout.
    pub fn target(&self, label: usize) -> Result<Vec<f64>> {
        let k = self.num_classes();
        if label >= k {
            return Err(Error::invalid(format!("label {label} outside {k} classes")));
        }
        Ok(match self.head().activation {
            Activation::Sigmoid => vec![label as f64],
            _ => (0..k).map(|c| if c == label { 1.0 } else { 0.0 }).collect(),
        })
    }

    /// Mean cross-entropy and its exact gradient over a batch.
    pub fn loss_and_gradient(&self, batch: &[(&[f64], usize)]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("gradient batch"));
        }
        let offsets = self.offsets();
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for &(x, label) in batch {
            self.check_input(x)?;
            let target = self.target(label)?;
            let trace = self.trace(x);
            let out = trace.activations.last().expect("non-empty");
            loss += cross_entropy(&target, out);

            // softmax/sigmoid head with cross-entropy: dL/dz = ŷ − y
            let mut delta: Vec<f64> = out.iter().zip(&target).map(|(p, y)| p - y).collect();
            for li in (0..self.layers.len()).rev() {
                let l = &self.layers[li];
                let input = &trace.activations[li];
                let off = offsets[li];
                let (gw, gb) = grad[off..off + l.param_count()].split_at_mut(l.fan_in * l.fan_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, a) in gw[o * l.fan_in..(o + 1) * l.fan_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                if li == 0 {
                    break;
                }
                let w = &self.params[off..off + l.fan_in * l.fan_out];
                let mut back = vec![0.0; l.fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (b, wi) in back.iter_mut().zip(&w[o * l.fan_in..(o + 1) * l.fan_in]) {
                        *b += d * wi;
                    }
                }
                let below = &self.layers[li - 1];
                let z = &trace.pre[li - 1];
                let a = &trace.activations[li];
                delta = match below.activation {
                    Activation::Relu => back
                        .iter()
                        .zip(z)
                        .map(|(b, z)| if *z > 0.0 { *b } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => {
                        back.iter().zip(a).map(|(b, a)| b * a * (1.0 - a)).collect()
                    }
                    Activation::Softmax => unreachable!("validated: softmax only on the head"),
                };
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    /// Exact gradient of the mean cross-entropy.
    pub fn gradient(&self, batch: &[(&[f64], usize)]) -> Result<Vec<f64>> {
        Ok(self.loss_and_gradient(batch)?.1)
    }

    /// Mean cross-entropy over a batch.
    pub fn mean_loss(&self, batch: &[(&[f64], usize)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        let mut total = 0.0;
        for &(x, label) in batch {
            total += cross_entropy(&self.target(label)?, &self.forward(x)?);
        }
        Ok(total / batch.len() as f64)
    }
}

impl Predictor for ModelState {
    fn num_classes(&self) -> usize {
        match self.head().activation {
            Activation::Sigmoid => 2,
            _ => self.head().fan_out,
        }
    }

    fn class_probabilities(&self, image: &DenseArray) -> Result<Vec<f64>> {
        let out = self.forward(image.data())?;
        Ok(match self.head().activation {
            Activation::Sigmoid => vec![1.0 - out[0], out[0]],
            _ => out,
        })
    }
}

/// Cross-entropy in nats. A single-entry `y` is a binary target against a
/// sigmoid probability; otherwise `−Σ y_i ln ŷ_i`.
pub fn cross_entropy(y: &[f64], y_hat: &[f64]) -> f64 {
    let clip = |p: f64| p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    if y.len() == 1 {
        let p = clip(y_hat[0]);
        -(y[0] * p.ln() + (1.0 - y[0]) * (1.0 - p).ln())
    } else {
        -y.iter()
            .zip(y_hat)
            .filter(|(t, _)| **t != 0.0)
            .map(|(t, p)| t * clip(*p).ln())
            .sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Cross-entropy only.
    #[serde(alias = "baseline")]
    Plain,
    /// `+ λ1 W1(S_t, S_{t+1})`
    Wcl,
    /// `+ λ1 W1 − λ2 I(Y; Ŷ)` with MI-driven occlusion levels.
    Ial,
    /// `+ λ1 W1 − λ2 I + λ3 L_geo(M_t, M_{t+1})`
    Gcl,
}

impl LossVariant {
    pub fn uses_w1(self) -> bool {
        !matches!(self, LossVariant::Plain)
    }

    pub fn uses_mi(self) -> bool {
        matches!(self, LossVariant::Ial | LossVariant::Gcl)
    }

    pub fn uses_geodesic(self) -> bool {
        matches!(self, LossVariant::Gcl)
    }
}

/// Settings of the loss-induced metric on the projected head subspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    /// Coordinates of the projected subspace (at most 20).
    pub dim: usize,
    /// Curvature weight in `g = I + β Ĥ`.
    pub beta: f64,
    /// Stage samples used for the curvature estimate.
    pub curvature_samples: usize,
    pub shooting: ShootingConfig,
    /// Replace the curvature metric by the identity.
    pub identity_metric: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            beta: 1.0,
            curvature_samples: 64,
            shooting: ShootingConfig {
                steps: 20,
                method: Integrator::Rk4,
                fd_step: DEFAULT_FD_STEP,
                tol: 1e-8,
                max_iter: 100,
            },
            identity_metric: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Occlusion histogram bins.
    pub bins: usize,
    pub ial: IalConfig,
    pub geometry: GeometryConfig,
}

impl LossConfig {
    pub fn new(variant: LossVariant) -> Self {
        Self {
            variant,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.1,
            bins: 16,
            ial: IalConfig::evenly_spaced(0.5, 5, 64).expect("static grid is valid"),
            geometry: GeometryConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.bins == 0 {
            return Err(Error::invalid("histogram bins must be at least 1"));
        }
        if self.variant.uses_mi() {
            self.ial.validate()?;
        }
        if self.variant.uses_geodesic() && !(1..=20).contains(&self.geometry.dim) {
            return Err(Error::invalid(format!(
                "projected subspace dimension must be in 1..=20, got {}",
                self.geometry.dim
            )));
        }
        Ok(())
    }
}

/// Composite objective with every component echoed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data_loss: f64,
    pub w1: f64,
    pub mi: f64,
    pub l_geo: f64,
    pub value: f64,
}

/// `data + λ1·w1 − λ2·mi + λ3·l_geo`, with the λ of inactive terms treated as
/// zero for the configured variant.
pub fn composite_loss(
    data_loss: f64,
    w1: f64,
    mi: f64,
    l_geo: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("lambda1", cfg.lambda1),
        ("lambda2", cfg.lambda2),
        ("lambda3", cfg.lambda3),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid(format!(
                "{name} must be non-negative, got {v}"
            )));
        }
    }
    let v = cfg.variant;
    let l1 = if v.uses_w1() { cfg.lambda1 } else { 0.0 };
    let l2 = if v.uses_mi() { cfg.lambda2 } else { 0.0 };
    let l3 = if v.uses_geodesic() { cfg.lambda3 } else { 0.0 };
    Ok(LossBreakdown {
        data_loss,
        w1,
        mi,
        l_geo,
        value: data_loss + l1 * w1 - l2 * mi + l3 * l_geo,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    /// Mean data loss of each epoch, from the forward passes of its batches.
    pub epoch_losses: Vec<f64>,
}

fn check_sgd(cfg: &SgdConfig) -> Result<()> {
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be non-negative, got {}",
            cfg.learning_rate
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    Ok(())
}

fn train_stage_observed(
    model: &mut ModelState,
    stage: &[Sample],
    cfg: &SgdConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&ModelState),
) -> Result<StageLog> {
    if stage.is_empty() {
        return Err(Error::Empty("training stage"));
    }
    check_sgd(cfg)?;
    let mut order: Vec<usize> = (0..stage.len()).collect();
    let mut log = StageLog::default();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (stage[i].image.data(), stage[i].label))
                .collect();
            let (loss, grad) = model.loss_and_gradient(&batch)?;
            epoch_loss += loss * batch.len() as f64;
            for (p, g) in model.params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            model.step_count += 1;
        }
        log.epoch_losses.push(epoch_loss / stage.len() as f64);
        on_epoch(model);
    }
    Ok(log)
}

/// SGD over shuffled minibatches of one stage.
pub fn train_stage(
    model: &mut ModelState,
    stage: &[Sample],
    cfg: &SgdConfig,
    rng: &mut Rng,
) -> Result<StageLog> {
    train_stage_observed(model, stage, cfg, rng, |_| {})
}

/// Orthonormal `rows × dim` basis with Gaussian-initialized columns.
fn random_projection(rows: usize, dim: usize, rng: &mut Rng) -> Result<DMatrix<f64>> {
    let dim = dim.min(rows);
    let mut p = DMatrix::from_fn(rows, dim, |_, _| rng.normal(0.0, 1.0));
    for c in 0..dim {
        for prev in 0..c {
            let proj = p.column(c).dot(&p.column(prev));
            let prev_col = p.column(prev).clone_owned();
            p.column_mut(c).axpy(-proj, &prev_col, 1.0);
        }
        let n = p.column(c).norm();
        if n < 1e-12 {
            return Err(Error::invalid("degenerate random projection"));
        }
        p.column_mut(c).unscale_mut(n);
    }
    Ok(p)
}

/// Fixed random subspace of the head parameters used for geodesic
/// diagnostics.
#[derive(Clone, Debug)]
pub struct HeadProjection {
    basis: DMatrix<f64>,
}

impl HeadProjection {
    pub fn new(model: &ModelState, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            basis: random_projection(model.head_param_count(), dim, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Coordinates of `to − from` (head parameters only).
    pub fn coordinates(&self, from: &ModelState, to: &ModelState) -> Vec<f64> {
        let off = from.head_offset();
        let n = from.head_param_count();
        let diff = nalgebra::DVector::from_iterator(
            n,
            to.params[off..off + n]
                .iter()
                .zip(&from.params[off..off + n])
                .map(|(b, a)| b - a),
        );
        (self.basis.transpose() * diff).iter().copied().collect()
    }
}

/// `g(z) = I + β Ĥ(z)` on the projected head subspace around a reference
/// model, where `Ĥ` is the Gauss-Newton curvature of the cross-entropy over a
/// fixed sample set. The head Jacobian `∂logits/∂z` is taken by central
/// differences once; the output probabilities are re-evaluated at every `z`.
pub struct HeadCurvatureMetric {
    dim: usize,
    beta: f64,
    sigmoid_head: bool,
    base_logits: Vec<Vec<f64>>,
    jacobians: Vec<DMatrix<f64>>,
}

impl HeadCurvatureMetric {
    pub fn new(
        reference: &ModelState,
        samples: &[Sample],
        projection: &HeadProjection,
        beta: f64,
        fd_step: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("curvature samples"));
        }
        let head = *reference.head();
        let off = reference.head_offset();
        let dim = projection.dim();
        let head_logits = |params: &[f64], phi: &[f64]| -> Vec<f64> {
            let (w, b) = params.split_at(head.fan_in * head.fan_out);
            w.chunks(head.fan_in)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(phi).map(|(a, c)| a * c).sum::<f64>())
                .collect()
        };
        let base_head = &reference.params[off..off + head.param_count()];
        let shifted = |coord: usize, step: f64| -> Vec<f64> {
            base_head
                .iter()
                .enumerate()
                .map(|(i, p)| p + step * projection.basis[(i, coord)])
                .collect()
        };
        let plus: Vec<Vec<f64>> = (0..dim).map(|c| shifted(c, fd_step)).collect();
        let minus: Vec<Vec<f64>> = (0..dim).map(|c| shifted(c, -fd_step)).collect();

        let mut base_logits = Vec::with_capacity(samples.len());
        let mut jacobians = Vec::with_capacity(samples.len());
        for s in samples {
            let phi = reference.penultimate(s.image.data())?;
            base_logits.push(head_logits(base_head, &phi));
            let mut jac = DMatrix::zeros(head.fan_out, dim);
            for c in 0..dim {
                let lp = head_logits(&plus[c], &phi);
                let lm = head_logits(&minus[c], &phi);
                for o in 0..head.fan_out {
                    jac[(o, c)] = (lp[o] - lm[o]) / (2.0 * fd_step);
                }
            }
            jacobians.push(jac);
        }
        Ok(Self {
            dim,
            beta,
            sigmoid_head: head.activation == Activation::Sigmoid,
            base_logits,
            jacobians,
        })
    }
}

impl MetricField for HeadCurvatureMetric {
    fn dim(&self) -> usize {
        self.dim
    }

    fn metric(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let zv = nalgebra::DVector::from_column_slice(z);
        let mut gn = DMatrix::zeros(self.dim, self.dim);
        for (logits0, jac) in self.base_logits.iter().zip(&self.jacobians) {
            let shift = jac * &zv;
            let logits: Vec<f64> = logits0
                .iter()
                .zip(shift.iter())
                .map(|(a, b)| a + b)
                .collect();
            let k = logits.len();
            let output_hessian = if self.sigmoid_head {
                let p = sigmoid(logits[0]);
                DMatrix::from_element(1, 1, p * (1.0 - p))
            } else {
                let p = softmax(&logits);
                DMatrix::from_fn(k, k, |i, j| {
                    if i == j {
                        p[i] - p[i] * p[j]
                    } else {
                        -p[i] * p[j]
                    }
                })
            };
            gn += jac.transpose() * output_hessian * jac;
        }
        gn /= self.base_logits.len() as f64;
        let g = DMatrix::identity(self.dim, self.dim) + gn * self.beta;
        let sym = (&g + g.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let floored = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
        let rebuilt =
            &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
        Ok((&rebuilt + rebuilt.transpose()) * 0.5)
    }
}

/// Epoch budget and optimizer settings for a curriculum run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumTrainConfig {
    pub sgd: SgdConfig,
    /// Epochs of each stage; `sgd.epochs` for every stage when absent.
    pub stage_epochs: Option<Vec<usize>>,
    /// Occlusion used when the variant re-occludes newly added samples.
    pub strategy: Option<OcclusionStrategy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub size: usize,
    pub max_level: f64,
    pub epoch_losses: Vec<f64>,
    /// Mean data loss of the final epoch (0 when the stage ran no epochs).
    pub data_loss: f64,
    pub selection: Option<LevelSelection>,
    /// `W1(S_t, S_{t+1})`, absent for the last stage.
    pub w1: Option<f64>,
    /// `I(Y; Ŷ)` on the probe set after this stage.
    pub mi: Option<f64>,
    /// `L_geo(M_t, M_{t+1})`, absent for the last stage or a failed solve.
    pub l_geo: Option<f64>,
    pub l_geo_error: Option<String>,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: LossVariant,
    pub stages: Vec<StageReport>,
    /// Model at the end of every stage.
    pub snapshots: Vec<ModelState>,
    /// Contraction of per-epoch distances to the final parameters (geodesic
    /// variant only).
    pub convergence: Option<ConvergenceTrace>,
    pub rng_state: RngState,
    /// Masks of re-occluded samples as `(stage, origin_index, level_index, mask)`.
    #[serde(skip)]
    pub masks: Vec<(usize, usize, usize, Mask)>,
}

impl TrainReport {
    pub fn transition_w1(&self) -> Vec<f64> {
        self.stages.iter().filter_map(|s| s.w1).collect()
    }

    pub fn final_model(&self) -> &ModelState {
        self.snapshots.last().expect("at least one stage")
    }
}

const STREAM_SELECTION: u64 = 0x5E1E_C700;
const STREAM_REOCCLUDE: u64 = 0x0CC1_0DE0;
const STREAM_PROBE_MI: u64 = 0x9B0B_E000;
/// Stream (forked from the training generator) of the geodesic projection.
pub const PROJECTION_STREAM: u64 = 0x9E0D_E510;

/// Staged curriculum training.
///
/// For each stage `t`: MI variants first pick an occlusion level with the
/// current model and re-occlude the occluded copies that enter at this stage
/// (from `clean`, looked up by `origin_index`); the model is trained on
/// `S_t`; then the transition to `t + 1` is measured (W1 between stage
/// histograms, and for the geodesic variant `L_geo` between consecutive
/// snapshots on a projected head subspace).
pub fn train_curriculum(
    initial: &ModelState,
    schedule: &CurriculumSchedule,
    clean: &[Sample],
    probe: &[Sample],
    loss: &LossConfig,
    train: &CurriculumTrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    loss.validate()?;
    check_sgd(&train.sgd)?;
    let variant = loss.variant;
    if variant.uses_mi() && probe.is_empty() {
        return Err(Error::Empty("probe samples"));
    }
    let originals: HashMap<usize, &Sample> = clean.iter().map(|s| (s.origin_index, s)).collect();
    let mut working = schedule.clone();
    let stages = schedule.stages();
    let sizes = schedule.stage_sizes().to_vec();
    if let Some(e) = &train.stage_epochs {
        if e.len() != stages {
            return Err(Error::invalid(format!(
                "{} stage epoch counts for {stages} stages",
                e.len()
            )));
        }
    }
    let mut masks = Vec::new();

    let mut model = initial.clone();
    let mut snapshots: Vec<ModelState> = Vec::with_capacity(stages);
    let mut reports: Vec<StageReport> = Vec::with_capacity(stages);
    let mut selections: Vec<Option<LevelSelection>> = Vec::with_capacity(stages);
    let mut epoch_params: Vec<Vec<f64>> = Vec::new();
    let projection = if variant.uses_geodesic() {
        Some(HeadProjection::new(
            &model,
            loss.geometry.dim,
            &mut rng.fork(PROJECTION_STREAM),
        )?)
    } else {
        None
    };

    for t in 1..=stages {
        let start = if t == 1 { 0 } else { sizes[t - 2] };
        let selection = match (variant.uses_mi(), train.strategy) {
            (true, Some(strategy)) => {
                let sel = select_occlusion_level(
                    &model,
                    probe,
                    &loss.ial,
                    strategy,
                    &rng.fork(STREAM_SELECTION + t as u64),
                )?;
                let mut occ_rng = rng.fork(STREAM_REOCCLUDE + t as u64);
                for pos in start..sizes[t - 1] {
                    let current = &working.ordered()[pos];
                    if current.level_index == 0 {
                        continue;
                    }
                    let original = originals.get(&current.origin_index).ok_or_else(|| {
                        Error::invalid(format!(
                            "no clean sample for origin {}",
                            current.origin_index
                        ))
                    })?;
                    let (s, mask) = occlude_sample(
                        original,
                        sel.level,
                        current.level_index,
                        strategy,
                        SizeRule::AtMost,
                        &mut occ_rng,
                    )?;
                    masks.push((t, s.origin_index, s.level_index, mask));
                    working.replace(pos, s);
                }
                Some(sel)
            }
            _ => None,
        };
        selections.push(selection);

        let subset = working.stage_subset(t)?.to_vec();
        let sgd = SgdConfig {
            epochs: train
                .stage_epochs
                .as_ref()
                .map_or(train.sgd.epochs, |e| e[t - 1]),
            ..train.sgd.clone()
        };
        let log = if variant.uses_geodesic() {
            train_stage_observed(&mut model, &subset, &sgd, rng, |m| {
                epoch_params.push(m.params.clone())
            })?
        } else {
            train_stage(&mut model, &subset, &sgd, rng)?
        };
        snapshots.push(model.clone());

        let mi = if variant.uses_mi() {
            let level = selections[t - 1].as_ref().map_or(0.0, |s| s.level);
            let strategy = train.strategy.unwrap_or(OcclusionStrategy::Areal);
            let probe = &probe[..probe.len().min(loss.ial.probe_size)];
            Some(probe_mutual_information(
                &model,
                probe,
                level,
                strategy,
                &mut rng.fork(STREAM_PROBE_MI + t as u64),
            )?)
        } else {
            None
        };

        reports.push(StageReport {
            stage: t,
            size: subset.len(),
            max_level: subset.iter().map(difficulty).fold(0.0, f64::max),
            data_loss: log.epoch_losses.last().copied().unwrap_or(0.0),
            epoch_losses: log.epoch_losses,
            selection: selections[t - 1].clone(),
            w1: None,
            mi,
            l_geo: None,
            l_geo_error: None,
            breakdown: composite_loss(0.0, 0.0, 0.0, 0.0, loss)?,
        });

        if t >= 2 {
            // the previous transition is complete once S_t has its final levels
            let prev = &mut reports[t - 2];
            if variant.uses_w1() {
                prev.w1 = Some(stage_transition_distance(
                    &working.stage_levels(t - 1)?,
                    &working.stage_levels(t)?,
                    loss.bins,
                )?);
            }
            if let Some(proj) = &projection {
                match geodesic_length(
                    &snapshots[t - 2],
                    &snapshots[t - 1],
                    &subset,
                    proj,
                    &loss.geometry,
                ) {
                    Ok(len) => prev.l_geo = Some(len),
                    Err(e) => prev.l_geo_error = Some(e.to_string()),
                }
            }
        }
    }

    for r in &mut reports {
        r.breakdown = composite_loss(
            r.data_loss,
            r.w1.unwrap_or(0.0),
            r.mi.unwrap_or(0.0),
            r.l_geo.unwrap_or(0.0),
            loss,
        )?;
    }

    let convergence = if variant.uses_geodesic() {
        let last = &model.params;
        let errors: Vec<f64> = epoch_params
            .iter()
            .map(|p| {
                p.iter()
                    .zip(last)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        estimate_rate(&errors).ok()
    } else {
        None
    };

    Ok(TrainReport {
        variant,
        stages: reports,
        snapshots,
        convergence,
        rng_state: rng.state(),
        masks,
    })
}

/// `L_geo` between two snapshots on the projected head subspace, with the
/// curvature taken around `from` over (up to `curvature_samples` of) `stage`.
pub fn geodesic_length(
    from: &ModelState,
    to: &ModelState,
    stage: &[Sample],
    projection: &HeadProjection,
    cfg: &GeometryConfig,
) -> Result<f64> {
    let target = projection.coordinates(from, to);
    let origin = vec![0.0; projection.dim()];
    if cfg.identity_metric {
        return Ok(geodesic_distance(
            &origin,
            &target,
            &Euclidean {
                dim: projection.dim(),
            },
            &cfg.shooting,
        )?
        .distance);
    }
    let samples = &stage[..stage.len().min(cfg.curvature_samples.max(1))];
    let metric =
        HeadCurvatureMetric::new(from, samples, projection, cfg.beta, cfg.shooting.fd_step)?;
    Ok(geodesic_distance(&origin, &target, &metric, &cfg.shooting)?.distance)
}

pub const CHECKPOINT_FORMAT: &str = "occl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model container (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
    pub step_count: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(model: &ModelState, rng: RngState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layers: model.layers.clone(),
            params: model.params.clone(),
            step_count: model.step_count,
            rng,
        }
    }

    pub fn model(&self) -> Result<ModelState> {
        ModelState::from_parts(self.layers.clone(), self.params.clone(), self.step_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
