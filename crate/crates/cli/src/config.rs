use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use occl_core::curriculum::OcclusionStrategy;
use occl_core::datasets::TaskSpec;
use occl_core::geometry::{Integrator, ShootingConfig, DEFAULT_FD_STEP};
use occl_core::infotheory::IalConfig;
use occl_core::trainer::{GeometryConfig, LossConfig, LossVariant};

use crate::CliError;

pub const OUTPUT_ROOT_ENV: &str = "OCCL_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Clean training data, one stage.
    Baseline,
    /// Filled random rectangles.
    Pros,
    /// Width-3 hollow rectangles.
    Pbos,
}

impl Strategy {
    pub fn occlusion(self) -> Option<OcclusionStrategy> {
        match self {
            Strategy::Baseline => None,
            Strategy::Pros => Some(OcclusionStrategy::Areal),
            Strategy::Pbos => Some(OcclusionStrategy::Border),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Baseline => "Baseline",
            Strategy::Pros => "PROS",
            Strategy::Pbos => "PBOS",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Wcl,
    Ial,
    Gcl,
}

impl Variant {
    pub fn loss(self) -> LossVariant {
        match self {
            Variant::Plain => LossVariant::Plain,
            Variant::Wcl => LossVariant::Wcl,
            Variant::Ial => LossVariant::Ial,
            Variant::Gcl => LossVariant::Gcl,
        }
    }

    pub fn label(self) -> Option<&'static str> {
        match self {
            Variant::Plain => None,
            Variant::Wcl => Some("WCL"),
            Variant::Ial => Some("IAL"),
            Variant::Gcl => Some("GCL"),
        }
    }
}

/// Flat experiment configuration. Every field has a default; a JSON file
/// may set any subset, and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `root/<class>/*.pgm` tree; synthetic glyphs when absent.
    pub data_dir: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub k: usize,
    pub n: usize,
    pub noise_sigma: f64,
    /// Train/validation/test fractions; validation doubles as the probe set.
    pub split: [f64; 3],

    pub strategy: Strategy,
    pub variant: Variant,
    /// Curriculum stages `T` (forced to 1 for the baseline).
    pub stages: usize,
    /// Occluded copies per image; copy `j` targets `j·max_level/delta`.
    pub delta: usize,
    pub max_level: f64,
    /// Raise `stages` until every stage transition has W1 at most this.
    pub max_transition_w1: Option<f64>,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub bins: usize,
    pub alpha: f64,
    pub ial_candidates: usize,
    pub probe_size: usize,
    pub geo_dim: usize,
    pub geo_beta: f64,
    pub geo_steps: usize,
    pub geo_identity: bool,

    pub hidden: Vec<usize>,
    /// Total epochs, split across stages (later stages take the remainder).
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,

    /// Occlusion fraction of the perturbed test evaluation.
    pub eval_occlusion: f64,
    pub seed: u64,
    pub output_root: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            height: 32,
            width: 32,
            channels: 1,
            k: 4,
            n: 400,
            noise_sigma: 0.1,
            split: [0.8, 0.1, 0.1],
            strategy: Strategy::Pros,
            variant: Variant::Plain,
            stages: 3,
            delta: 2,
            max_level: 0.5,
            max_transition_w1: None,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.1,
            bins: 16,
            alpha: 0.5,
            ial_candidates: 6,
            probe_size: 64,
            geo_dim: 4,
            geo_beta: 1.0,
            geo_steps: 20,
            geo_identity: false,
            hidden: vec![64, 32],
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 16,
            eval_occlusion: 0.3,
            seed: 0,
            output_root: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies strategy-implied settings and checks ranges.
    pub fn resolved(mut self) -> Result<Self, CliError> {
        if self.strategy == Strategy::Baseline {
            if self.variant != Variant::Plain {
                return Err(CliError::Config(format!(
                    "the baseline strategy trains on clean data only; variant {:?} needs pros or pbos",
                    self.variant
                )));
            }
            self.stages = 1;
        }
        if self.stages == 0 {
            return Err(CliError::Config("stages must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(CliError::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_level) || !(0.0..=1.0).contains(&self.eval_occlusion) {
            return Err(CliError::Config(
                "occlusion levels must lie in [0, 1]".into(),
            ));
        }
        if self.strategy != Strategy::Baseline && self.delta == 0 && self.max_level > 0.0 {
            return Err(CliError::Config(
                "delta = 0 leaves no occluded copies; set max_level to 0".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(CliError::Config(
                "hidden layer widths must be positive".into(),
            ));
        }
        self.loss_config()?.validate()?;
        Ok(self)
    }

    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            height: self.height,
            width: self.width,
            channels: self.channels,
            k: self.k,
            glyphs: None,
            noise_sigma: self.noise_sigma,
            n: self.n,
        }
    }

    pub fn loss_config(&self) -> Result<LossConfig, CliError> {
        Ok(LossConfig {
            variant: self.variant.loss(),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            bins: self.bins,
            ial: IalConfig::evenly_spaced(self.alpha, self.ial_candidates, self.probe_size)?,
            geometry: GeometryConfig {
                dim: self.geo_dim,
                beta: self.geo_beta,
                shooting: ShootingConfig {
                    steps: self.geo_steps,
                    method: Integrator::Rk4,
                    fd_step: DEFAULT_FD_STEP,
                    tol: 1e-8,
                    max_iter: 100,
                },
                identity_metric: self.geo_identity,
                ..GeometryConfig::default()
            },
        })
    }

    /// `epochs` split over `stages`; the remainder goes to the last stages.
    pub fn stage_epochs(&self, stages: usize) -> Vec<usize> {
        let base = self.epochs / stages;
        let extra = self.epochs % stages;
        (0..stages)
            .map(|t| base + usize::from(t >= stages - extra))
            .collect()
    }

    pub fn strategy_label(&self) -> String {
        match self.variant.label() {
            Some(v) => format!("{}+{v}", self.strategy.label()),
            None => self.strategy.label().to_string(),
        }
    }

    /// Flag > environment > config file > `runs`.
    pub fn output_root(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        self.output_root
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
    }
}
