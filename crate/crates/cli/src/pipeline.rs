//! The train pipeline: data → normalization → occlusion expansion →
//! schedule → curriculum training → evaluation → run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use occl_core::curriculum::{
    expand_levels, linear_levels, occlude_sample, CurriculumSchedule, OcclusionStrategy, Sample,
    StageSummary,
};
use occl_core::datasets::{
    apply_normalization, fit_normalization, generate_synthetic, load_directory, split,
    LabeledDataset, NormParams,
};
use occl_core::geometry::ConvergenceTrace;
use occl_core::metrics::{report, MetricsReport, CSV_HEADER};
use occl_core::occlusion::{Mask, SizeRule};
use occl_core::tensor::{Rng, RngState};
use occl_core::trainer::{
    head_layer, train_curriculum, Activation, Checkpoint, CurriculumTrainConfig, LayerSpec,
    LossVariant, ModelState, SgdConfig, StageReport, TrainReport,
};
use occl_core::transport::{refine_schedule, schedule_transitions};

use crate::config::RunConfig;
use crate::{CliError, CliResult};

/// Independent random streams derived from the run seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const EXPAND: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const EVAL: u64 = 6;
}

/// Normalized splits; parameters are fitted on the training split only.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub name: String,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub norm: NormParams,
}

pub fn prepare_data(cfg: &RunConfig) -> CliResult<PreparedData> {
    let rng = Rng::new(cfg.seed);
    let (ds, name) = match &cfg.data_dir {
        Some(dir) => {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".to_string());
            (load_directory(dir, cfg.height, cfg.width)?, name)
        }
        None => (
            generate_synthetic(&cfg.task(), &mut rng.fork(streams::DATA))?,
            format!("synthetic-k{}", cfg.k),
        ),
    };
    let [f_train, f_val, f_test] = cfg.split;
    let [train, val, test] = split(&ds, (f_train, f_val, f_test), &mut rng.fork(streams::SPLIT))?;
    let norm = fit_normalization(&train)?;
    Ok(PreparedData {
        name,
        train: apply_normalization(&train, &norm)?,
        val: apply_normalization(&val, &norm)?,
        test: apply_normalization(&test, &norm)?,
        norm,
    })
}

/// Mask of one occluded training copy.
#[derive(Clone, Debug)]
pub struct MaskEntry {
    pub phase: String,
    pub origin_index: usize,
    pub level_index: usize,
    pub mask: Mask,
}

/// Expanded training set ordered into stages, plus the masks that produced
/// its occluded copies.
pub fn build_schedule(
    cfg: &RunConfig,
    train: &LabeledDataset,
) -> CliResult<(CurriculumSchedule, Vec<MaskEntry>)> {
    let (samples, masks) = match cfg.strategy.occlusion() {
        None => (train.samples.clone(), Vec::new()),
        Some(strategy) => {
            let mut rng = Rng::new(cfg.seed).fork(streams::EXPAND);
            let (samples, masks) = expand_levels(
                &train.samples,
                cfg.delta,
                &linear_levels(cfg.delta, cfg.max_level),
                strategy,
                &mut rng,
            )?;
            let entries = samples[train.len()..]
                .iter()
                .zip(masks)
                .map(|(s, mask)| MaskEntry {
                    phase: "expand".into(),
                    origin_index: s.origin_index,
                    level_index: s.level_index,
                    mask,
                })
                .collect();
            (samples, entries)
        }
    };
    let schedule = CurriculumSchedule::new(samples, cfg.stages)?;
    let schedule = match cfg.max_transition_w1 {
        Some(threshold) => refine_schedule(&schedule, cfg.bins, threshold)?,
        None => schedule,
    };
    Ok((schedule, masks))
}

pub fn layer_spec(cfg: &RunConfig, input: usize, classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::with_capacity(cfg.hidden.len() + 1);
    let mut fan_in = input;
    for &h in &cfg.hidden {
        layers.push(LayerSpec::new(fan_in, h, Activation::Relu));
        fan_in = h;
    }
    layers.push(head_layer(fan_in, classes));
    layers
}

pub fn initial_model(cfg: &RunConfig, data: &PreparedData) -> CliResult<ModelState> {
    let input = data
        .train
        .samples
        .first()
        .map(|s| s.image.len())
        .ok_or(occl_core::Error::Empty("training split"))?;
    let seed = Rng::new(cfg.seed).fork(streams::INIT).seed();
    Ok(ModelState::init(
        layer_spec(cfg, input, data.train.k()),
        seed,
    )?)
}

/// Test images occluded at `level` with filled rectangles. The masks depend
/// only on the run seed, so every strategy sees the same perturbed set.
pub fn occluded_test(cfg: &RunConfig, test: &LabeledDataset, level: f64) -> CliResult<Vec<Sample>> {
    let mut rng = Rng::new(cfg.seed).fork(streams::EVAL);
    test.samples
        .iter()
        .map(|s| {
            Ok(occlude_sample(
                s,
                level,
                1,
                OcclusionStrategy::Areal,
                SizeRule::Nearest,
                &mut rng,
            )?
            .0)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub dataset: String,
    pub occlusion: f64,
    pub metrics: MetricsReport,
}

pub fn evaluate(
    cfg: &RunConfig,
    model: &ModelState,
    data: &PreparedData,
) -> CliResult<Vec<Evaluation>> {
    let occluded = occluded_test(cfg, &data.test, cfg.eval_occlusion)?;
    Ok(vec![
        Evaluation {
            dataset: data.name.clone(),
            occlusion: 0.0,
            metrics: report(model, &data.test.samples)?,
        },
        Evaluation {
            dataset: format!("{}@occluded-{:.2}", data.name, cfg.eval_occlusion),
            occlusion: cfg.eval_occlusion,
            metrics: report(model, &occluded)?,
        },
    ])
}

/// `metrics.csv` contents: header plus one row per evaluation.
pub fn metrics_csv(strategy: &str, evaluations: &[Evaluation]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for e in evaluations {
        out.push_str(&e.metrics.csv_row(strategy, &e.dataset));
        out.push('\n');
    }
    out
}

/// Everything a train run produces, before it is written to disk.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub dataset: String,
    pub norm: NormParams,
    pub schedule: Vec<StageSummary>,
    pub transitions: Vec<f64>,
    pub expansion_masks: Vec<MaskEntry>,
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
    pub evaluations: Vec<Evaluation>,
}

impl RunOutcome {
    pub fn csv(&self) -> String {
        metrics_csv(&self.config.strategy_label(), &self.evaluations)
    }

    pub fn clean(&self) -> &MetricsReport {
        &self.evaluations[0].metrics
    }

    pub fn occluded(&self) -> &MetricsReport {
        &self.evaluations[1].metrics
    }
}

/// Runs the full pipeline for a resolved configuration.
pub fn run(cfg: &RunConfig) -> CliResult<RunOutcome> {
    let cfg = cfg.clone().resolved()?;
    let data = prepare_data(&cfg)?;
    let (schedule, expansion_masks) = build_schedule(&cfg, &data.train)?;
    let transitions = schedule_transitions(&schedule, cfg.bins)?;
    let model = initial_model(&cfg, &data)?;
    let loss = cfg.loss_config()?;
    let train_cfg = CurriculumTrainConfig {
        sgd: SgdConfig {
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
        },
        stage_epochs: Some(cfg.stage_epochs(schedule.stages())),
        strategy: cfg.strategy.occlusion(),
    };
    let mut rng = Rng::new(cfg.seed).fork(streams::TRAIN);
    let report = train_curriculum(
        &model,
        &schedule,
        &data.train.samples,
        &data.val.samples,
        &loss,
        &train_cfg,
        &mut rng,
    )?;
    let final_model = report.final_model().clone();
    let evaluations = evaluate(&cfg, &final_model, &data)?;
    Ok(RunOutcome {
        dataset: data.name.clone(),
        norm: data.norm,
        schedule: schedule.summary(),
        transitions,
        expansion_masks,
        checkpoint: Checkpoint::new(&final_model, report.rng_state),
        report,
        evaluations,
        config: cfg,
    })
}

/// Creates `root/<name>`, or `root/<name>-2`, `-3`, … if taken.
pub fn allocate_dir(root: &Path, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
    for i in 1.. {
        let candidate = if i == 1 {
            root.join(name)
        } else {
            root.join(format!("{name}-{i}"))
        };
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::io(candidate, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct TrainReportFile<'a> {
    variant: LossVariant,
    strategy: String,
    dataset: &'a str,
    seed: u64,
    stage_sizes: Vec<usize>,
    stages: &'a [StageReport],
    transition_w1: Vec<f64>,
    l_geo: Vec<Option<f64>>,
    convergence: &'a Option<ConvergenceTrace>,
    rng_state: RngState,
    snapshots: Vec<String>,
}

fn mask_event(
    stage: Option<usize>,
    phase: &str,
    origin: usize,
    level_index: usize,
    mask: &Mask,
) -> serde_json::Value {
    json!({
        "event": "mask",
        "phase": phase,
        "stage": stage,
        "origin_index": origin,
        "level_index": level_index,
        "height": mask.height(),
        "width": mask.width(),
        "zeros": mask.zero_coords(),
    })
}

/// Writes the run directory and returns its path.
pub fn write_run(outcome: &RunOutcome, root: &Path) -> CliResult<PathBuf> {
    let cfg = &outcome.config;
    let name = format!(
        "{}-{}-seed{}",
        format!("{:?}", cfg.strategy).to_lowercase(),
        format!("{:?}", cfg.variant).to_lowercase(),
        cfg.seed
    );
    let dir = allocate_dir(root, &name)?;
    write_json(&dir.join("config.json"), cfg)?;
    outcome.checkpoint.save(&dir.join("checkpoint.json"))?;

    let snap_dir = dir.join("snapshots");
    fs::create_dir(&snap_dir).map_err(|e| CliError::io(&snap_dir, e))?;
    let mut snapshots = Vec::new();
    for (i, m) in outcome.report.snapshots.iter().enumerate() {
        let rel = format!("snapshots/stage-{}.json", i + 1);
        Checkpoint::new(m, outcome.report.rng_state).save(&dir.join(&rel))?;
        snapshots.push(rel);
    }
    let report = &outcome.report;
    write_json(
        &dir.join("trainreport.json"),
        &TrainReportFile {
            variant: report.variant,
            strategy: cfg.strategy_label(),
            dataset: &outcome.dataset,
            seed: cfg.seed,
            stage_sizes: report.stages.iter().map(|s| s.size).collect(),
            stages: &report.stages,
            transition_w1: report.transition_w1(),
            l_geo: report
                .stages
                .iter()
                .take(report.stages.len().saturating_sub(1))
                .map(|s| s.l_geo)
                .collect(),
            convergence: &report.convergence,
            rng_state: report.rng_state,
            snapshots,
        },
    )?;
    write_text(&dir.join("metrics.csv"), &outcome.csv())?;
    write_json(&dir.join("metrics.json"), &outcome.evaluations)?;

    let log_path = dir.join("log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let mut emit = |value: serde_json::Value| -> CliResult<()> {
        serde_json::to_writer(&mut log, &value)?;
        log.write_all(b"\n").map_err(|e| CliError::io(&log_path, e))
    };
    emit(json!({
        "event": "run_start",
        "seed": cfg.seed,
        "strategy": cfg.strategy,
        "variant": cfg.variant,
        "dataset": outcome.dataset,
        "alpha": cfg.alpha,
        "normalization": outcome.norm,
    }))?;
    emit(
        json!({"event": "schedule", "stages": outcome.schedule, "transition_w1": outcome.transitions}),
    )?;
    for m in &outcome.expansion_masks {
        emit(mask_event(
            None,
            &m.phase,
            m.origin_index,
            m.level_index,
            &m.mask,
        ))?;
    }
    for s in &report.stages {
        emit(json!({
            "event": "stage",
            "stage": s.stage,
            "size": s.size,
            "max_level": s.max_level,
            "epoch_losses": s.epoch_losses,
            "selected_level": s.selection.as_ref().map(|sel| sel.level),
            "selection": s.selection,
            "alpha": cfg.alpha,
            "w1": s.w1,
            "mi": s.mi,
            "l_geo": s.l_geo,
            "l_geo_error": s.l_geo_error,
            "breakdown": s.breakdown,
        }))?;
    }
    for (stage, origin, level_index, mask) in &report.masks {
        emit(mask_event(
            Some(*stage),
            "reocclude",
            *origin,
            *level_index,
            mask,
        ))?;
    }
    if report.variant == LossVariant::Gcl {
        emit(json!({
            "event": "geodesic",
            "l_geo": report.stages.iter().map(|s| s.l_geo).collect::<Vec<_>>(),
            "estimated_rate": report.convergence.as_ref().map(|c| c.estimated_rate),
        }))?;
    }
    for e in &outcome.evaluations {
        emit(
            json!({"event": "evaluation", "dataset": e.dataset, "occlusion": e.occlusion, "metrics": e.metrics}),
        )?;
    }
    emit(json!({"event": "run_end", "steps": outcome.checkpoint.step_count}))?;
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    Ok(dir)
}
