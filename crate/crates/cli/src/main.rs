use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use occl_cli::commands::{self, Manifold};
use occl_cli::config::{RunConfig, Strategy, Variant};
use occl_cli::pipeline::{self, allocate_dir, write_json, write_text};
use occl_cli::{CliError, CliResult};
use occl_core::geometry::Integrator;

#[derive(Parser)]
#[command(
    name = "occl",
    version,
    about = "Curriculum training on occluded images"
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root directory for run outputs (also OCCL_OUTPUT_ROOT).
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic task as a PGM tree with a manifest.
    Synth {
        #[command(flatten)]
        overrides: Overrides,
        /// Target directory (default: a fresh directory under the output root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run (or a seed sweep) and write its run directory.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Half-open seed range `a..b` (or `a..=b`) run in parallel.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Report stage sizes, level ranges and transition distances.
    InspectSchedule {
        #[command(flatten)]
        overrides: Overrides,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Geodesic between two points of a test manifold or two checkpoints.
    Geodesic {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, conflicts_with = "checkpoints")]
        manifold: Option<Manifold>,
        /// Comma-separated coordinates.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        from: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        to: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, value_enum, default_value = "rk4")]
        method: Method,
        #[arg(long, num_args = 2, value_names = ["FROM", "TO"])]
        checkpoints: Option<Vec<PathBuf>>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured test split.
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for metrics.csv and metrics.json (default: CSV on stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Method {
    Euler,
    Rk4,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    /// Loss variant.
    #[arg(long, value_enum)]
    variant: Option<Variant>,
    /// Curriculum stage count T.
    #[arg(long)]
    stages: Option<usize>,
    /// Occluded copies per training image.
    #[arg(long)]
    delta: Option<usize>,
    /// Occlusion level of the last copy.
    #[arg(long)]
    max_level: Option<f64>,
    /// Raise T until every stage transition has W1 at most this (bin units).
    #[arg(long)]
    max_transition_w1: Option<f64>,
    /// Weight of the transition W1 term.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the mutual information term.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Weight of the geodesic term.
    #[arg(long)]
    lambda3: Option<f64>,
    /// Occlusion histogram bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Largest occlusion level the MI-driven selection may pick.
    #[arg(long)]
    alpha: Option<f64>,
    /// Total epochs, split across stages.
    #[arg(long)]
    epochs: Option<usize>,
    /// SGD step size.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// SGD minibatch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic sample count.
    #[arg(long)]
    n: Option<usize>,
    /// Class count.
    #[arg(long)]
    k: Option<usize>,
    /// Synthetic pixel noise.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Load `<dir>/<class>/*.pgm` instead of synthesizing.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Occlusion level of the perturbed test set.
    #[arg(long)]
    eval_occlusion: Option<f64>,
}

impl Overrides {
    fn apply(&self, mut cfg: RunConfig) -> RunConfig {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(
            strategy,
            variant,
            stages,
            delta,
            max_level,
            lambda1,
            lambda2,
            lambda3,
            bins,
            alpha,
            epochs,
            learning_rate,
            batch_size,
            seed,
            n,
            k,
            noise_sigma,
            eval_occlusion
        );
        if self.max_transition_w1.is_some() {
            cfg.max_transition_w1 = self.max_transition_w1;
        }
        if self.data_dir.is_some() {
            cfg.data_dir = self.data_dir.clone();
        }
        cfg
    }
}

fn parse_seeds(spec: &str) -> CliResult<Vec<u64>> {
    let bad = || {
        CliError::Config(format!(
            "seed range {spec:?} is not of the form a..b or a..=b"
        ))
    };
    let (a, b, inclusive) = if let Some((a, b)) = spec.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = spec.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad());
    };
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    let seeds: Vec<u64> = if inclusive {
        (a..=b).collect()
    } else {
        (a..b).collect()
    };
    if seeds.is_empty() {
        return Err(CliError::Config(format!("seed range {spec:?} is empty")));
    }
    Ok(seeds)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn say(text: &str) -> CliResult<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.map_err(|e| CliError::io("<stdout>", e)),
    }
}

fn emit(out: Option<&Path>, value: &impl serde::Serialize) -> CliResult<()> {
    match out {
        Some(path) => write_json(path, value),
        None => say(&format!("{}\n", serde_json::to_string_pretty(value)?)),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let root_flag = cli.output_root.as_deref();
    match cli.command {
        Command::Synth { overrides, out } => {
            let cfg = overrides.apply(base);
            let out = match out {
                Some(dir) => dir,
                None => allocate_dir(
                    &cfg.output_root(root_flag),
                    &format!("synth-k{}-seed{}", cfg.k, cfg.seed),
                )?,
            };
            let manifest = commands::synth(&cfg, &out)?;
            eprintln!("wrote {} images", manifest.entries.len());
            say(&format!("{}\n", out.display()))?;
        }
        Command::Train { overrides, seeds } => {
            let cfg = overrides.apply(base);
            let root = cfg.output_root(root_flag);
            let seeds = match seeds {
                Some(spec) => parse_seeds(&spec)?,
                None => vec![cfg.seed],
            };
            let dirs: Vec<CliResult<PathBuf>> = seeds
                .par_iter()
                .map(|&seed| {
                    let run_cfg = RunConfig {
                        seed,
                        ..cfg.clone()
                    };
                    let outcome = pipeline::run(&run_cfg)?;
                    pipeline::write_run(&outcome, &root)
                })
                .collect();
            let mut first_err = None;
            for d in dirs {
                match d {
                    Ok(dir) => say(&format!("{}\n", dir.display()))?,
                    Err(e) if first_err.is_none() => first_err = Some(e),
                    Err(e) => eprintln!("{}", serde_json::to_string(&e.record())?),
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Command::InspectSchedule { overrides, out } => {
            let report = commands::inspect_schedule(&overrides.apply(base))?;
            emit(out.as_deref(), &report)?;
        }
        Command::Geodesic {
            overrides,
            manifold,
            from,
            to,
            steps,
            method,
            checkpoints,
            out,
        } => {
            let method = match method {
                Method::Euler => Integrator::Euler,
                Method::Rk4 => Integrator::Rk4,
            };
            match (manifold, checkpoints) {
                (Some(m), None) => emit(
                    out.as_deref(),
                    &commands::manifold_geodesic(m, &from, &to, steps, method)?,
                )?,
                (None, Some(pair)) => {
                    let cfg = overrides.apply(base);
                    emit(
                        out.as_deref(),
                        &commands::checkpoint_geodesic(&cfg, &pair[0], &pair[1])?,
                    )?
                }
                _ => {
                    return Err(CliError::Config(
                        "give either --manifold with --from/--to, or --checkpoints".into(),
                    ))
                }
            }
        }
        Command::Evaluate {
            overrides,
            checkpoint,
            out,
        } => {
            let cfg = overrides.apply(base);
            let evaluations = commands::evaluate(&cfg, &checkpoint)?;
            let csv = pipeline::metrics_csv(&cfg.strategy_label(), &evaluations);
            match out {
                Some(root) => {
                    let dir = allocate_dir(&root, "evaluation")?;
                    write_text(&dir.join("metrics.csv"), &csv)?;
                    write_json(&dir.join("metrics.json"), &evaluations)?;
                    say(&format!("{}\n", dir.display()))?;
                }
                None => say(&csv)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::to_string(&e.record()).unwrap_or_else(|_| e.to_string());
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
