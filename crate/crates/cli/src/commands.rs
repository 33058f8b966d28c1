use std::path::{Path, PathBuf};

use serde::Serialize;

use occl_core::curriculum::StageSummary;
use occl_core::datasets::{generate_synthetic, split, write_tree, Manifest};
use occl_core::geometry::{
    geodesic_distance, Euclidean, HalfPlane, Integrator, MetricField, Polar, ShootingConfig,
};
use occl_core::tensor::Rng;
use occl_core::trainer::{geodesic_length, Checkpoint, HeadProjection, PROJECTION_STREAM};
use occl_core::transport::schedule_transitions;

use crate::config::RunConfig;
use crate::pipeline::{self, streams, Evaluation};
use crate::{CliError, CliResult};

/// Writes the synthetic task as `out/<class>/<index>.pgm` plus
/// `out/manifest.json`, with split tags from the configured fractions.
pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<Manifest> {
    if cfg.data_dir.is_some() {
        return Err(CliError::Config(
            "synth generates glyph data; unset data_dir".into(),
        ));
    }
    let rng = Rng::new(cfg.seed);
    let ds = generate_synthetic(&cfg.task(), &mut rng.fork(streams::DATA))?;
    let [a, b, c] = cfg.split;
    let parts = split(&ds, (a, b, c), &mut rng.fork(streams::SPLIT))?;
    Ok(write_tree(out, &[&parts[0], &parts[1], &parts[2]])?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleReport {
    pub samples: usize,
    pub stages: usize,
    pub stage_sizes: Vec<usize>,
    pub levels: Vec<StageSummary>,
    /// `W1(S_t, S_{t+1})` in bin units.
    pub transition_w1: Vec<f64>,
    pub bins: usize,
}

/// Builds the configured schedule without training.
pub fn inspect_schedule(cfg: &RunConfig) -> CliResult<ScheduleReport> {
    let cfg = cfg.clone().resolved()?;
    let data = pipeline::prepare_data(&cfg)?;
    let (schedule, _) = pipeline::build_schedule(&cfg, &data.train)?;
    Ok(ScheduleReport {
        samples: schedule.len(),
        stages: schedule.stages(),
        stage_sizes: schedule.stage_sizes().to_vec(),
        levels: schedule.summary(),
        transition_w1: schedule_transitions(&schedule, cfg.bins)?,
        bins: cfg.bins,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Manifold {
    Euclidean,
    Polar,
    Halfplane,
}

/// Closed-form distance on the built-in manifolds.
pub fn oracle_distance(manifold: Manifold, a: &[f64], b: &[f64]) -> f64 {
    match manifold {
        Manifold::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt(),
        // (r, θ): chord between the Cartesian images
        Manifold::Polar => (a[0] * a[0] + b[0] * b[0] - 2.0 * a[0] * b[0] * (b[1] - a[1]).cos())
            .max(0.0)
            .sqrt(),
        Manifold::Halfplane => {
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            (1.0 + d2 / (2.0 * a[1] * b[1])).acosh()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ManifoldGeodesic {
    pub manifold: Manifold,
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    pub length: f64,
    pub oracle_length: f64,
    pub oracle_error: f64,
    pub residual: f64,
    pub iterations: usize,
    pub initial_velocity: Vec<f64>,
    pub path: Vec<Vec<f64>>,
}

pub fn manifold_geodesic(
    manifold: Manifold,
    from: &[f64],
    to: &[f64],
    steps: usize,
    method: Integrator,
) -> CliResult<ManifoldGeodesic> {
    let euclidean = Euclidean { dim: from.len() };
    let metric: &dyn MetricField = match manifold {
        Manifold::Euclidean => &euclidean,
        Manifold::Polar => &Polar,
        Manifold::Halfplane => &HalfPlane,
    };
    if from.len() != metric.dim() || to.len() != metric.dim() {
        return Err(CliError::Config(format!(
            "{manifold:?} points need {} coordinates, got {} and {}",
            metric.dim(),
            from.len(),
            to.len()
        )));
    }
    let cfg = ShootingConfig {
        steps,
        method,
        ..ShootingConfig::default()
    };
    let sol = geodesic_distance(from, to, metric, &cfg)?;
    let oracle = oracle_distance(manifold, from, to);
    Ok(ManifoldGeodesic {
        manifold,
        from: from.to_vec(),
        to: to.to_vec(),
        length: sol.distance,
        oracle_length: oracle,
        oracle_error: (sol.distance - oracle).abs(),
        residual: sol.residual,
        iterations: sol.iterations,
        initial_velocity: sol.initial_velocity,
        path: sol.path.points,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckpointGeodesic {
    pub from: PathBuf,
    pub to: PathBuf,
    pub dim: usize,
    pub coordinates: Vec<f64>,
    pub euclidean_length: f64,
    pub length: f64,
}

/// `L_geo` between two checkpoints on the configured projected head
/// subspace, with curvature from the configured training split.
pub fn checkpoint_geodesic(
    cfg: &RunConfig,
    from: &Path,
    to: &Path,
) -> CliResult<CheckpointGeodesic> {
    let cfg = cfg.clone().resolved()?;
    let a = Checkpoint::load(from)?.model()?;
    let b = Checkpoint::load(to)?.model()?;
    if a.layers() != b.layers() {
        return Err(CliError::Config(
            "checkpoints have different architectures".into(),
        ));
    }
    let data = pipeline::prepare_data(&cfg)?;
    let loss = cfg.loss_config()?;
    let projection = HeadProjection::new(
        &a,
        loss.geometry.dim,
        &mut Rng::new(cfg.seed)
            .fork(streams::TRAIN)
            .fork(PROJECTION_STREAM),
    )?;
    let coordinates = projection.coordinates(&a, &b);
    let length = geodesic_length(&a, &b, &data.train.samples, &projection, &loss.geometry)?;
    Ok(CheckpointGeodesic {
        from: from.to_path_buf(),
        to: to.to_path_buf(),
        dim: projection.dim(),
        euclidean_length: coordinates.iter().map(|c| c * c).sum::<f64>().sqrt(),
        coordinates,
        length,
    })
}

/// Evaluates a checkpoint on the configured test split (clean and
/// occluded).
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path) -> CliResult<Vec<Evaluation>> {
    let cfg = cfg.clone().resolved()?;
    let model = Checkpoint::load(checkpoint)?.model()?;
    let data = pipeline::prepare_data(&cfg)?;
    pipeline::evaluate(&cfg, &model, &data)
}
