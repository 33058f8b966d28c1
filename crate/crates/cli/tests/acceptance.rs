//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs under `cargo test` with its own harness.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use occl_cli::config::{RunConfig, Strategy};
use occl_cli::pipeline;
use occl_core::curriculum::{difficulty, stage_size, CurriculumSchedule, Sample};
use occl_core::geometry::{
    christoffel, estimate_rate, geodesic_distance, integrate_geodesic, speed_squared, HalfPlane,
    Integrator, Polar, ShootingConfig,
};
use occl_core::infotheory::{conditional_entropy, entropy, mutual_information, JointCounts};
use occl_core::tensor::{DenseArray, Rng};
use occl_core::transport::{sinkhorn, solve_transport, w1_1d, CostMatrix};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn transport_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(0xA11);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let b = 2 + rng.below(15);
        let (p, q) = (random_histogram(b, &mut rng), random_histogram(b, &mut rng));
        let closed = w1_1d(&p, &q).map_err(|e| e.to_string())?;
        let (_, exact) = solve_transport(&p, &q, &CostMatrix::bin_distance(b, 1.0))
            .map_err(|e| e.to_string())?;
        worst = worst.max((closed - exact).abs());
        check((closed - exact).abs() <= 1e-9, || {
            format!("b = {b}: w1_1d {closed} vs exact {exact}")
        })?;
        check(
            (closed - cdf_w1(p.masses(), q.masses())).abs() <= 1e-9,
            || format!("b = {b}: CDF oracle disagrees"),
        )?;
    }
    for _ in 0..1000 {
        let b = 2 + rng.below(15);
        let (p, q, r) = (
            random_histogram(b, &mut rng),
            random_histogram(b, &mut rng),
            random_histogram(b, &mut rng),
        );
        let d = |x, y| w1_1d(x, y).unwrap();
        let (pq, qp, pr, qr) = (d(&p, &q), d(&q, &p), d(&p, &r), d(&q, &r));
        check(pq >= 0.0, || "negative distance".into())?;
        check(d(&p, &p) == 0.0, || "d(p, p) != 0".into())?;
        check(pq == qp, || format!("asymmetric: {pq} vs {qp}"))?;
        check(pr <= pq + qr + 1e-9, || {
            format!("triangle: {pr} > {pq} + {qr}")
        })?;
        let same = p.masses() == q.masses();
        check(same || pq > 0.0, || {
            "distinct histograms at distance 0".into()
        })?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "max |w1_1d − exact| = {worst:.1e}, axioms on 1000 triples, {elapsed:.2?}"
    ))
}

fn sinkhorn_convergence() -> Outcome {
    let mut rng = Rng::new(0xA12);
    let cost = CostMatrix::bin_distance(8, 1.0);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (p, q) = (random_histogram(8, &mut rng), random_histogram(8, &mut rng));
        let exact = solve_transport(&p, &q, &cost).map_err(|e| e.to_string())?.1;
        let s = sinkhorn(&p, &q, &cost, 1e-3, 100_000, 1e-9).map_err(|e| e.to_string())?;
        let rel = (s.cost - exact).abs() / exact.max(1e-6);
        worst = worst.max(rel);
        check(rel <= 0.01, || {
            format!("pair {i}: sinkhorn {} vs exact {exact}", s.cost)
        })?;
    }
    Ok(format!("max relative gap {worst:.2e} over 100 pairs"))
}

fn information_identities() -> Outcome {
    let h8 = entropy(&[0.125; 8]).map_err(|e| e.to_string())?;
    check(h8 == 3.0, || format!("H(uniform 8) = {h8}"))?;
    let mut rng = Rng::new(0xA13);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let k = 2 + rng.below(6);
        let table: Vec<u64> = loop {
            let t: Vec<u64> = (0..k * k)
                .map(|_| {
                    if rng.unit() < 0.3 {
                        0
                    } else {
                        rng.below(50) as u64
                    }
                })
                .collect();
            if t.iter().sum::<u64>() > 0 {
                break t;
            }
        };
        let j = JointCounts::from_table(k, table.clone()).map_err(|e| e.to_string())?;
        let mi = mutual_information(&j).unwrap();
        check(mi >= -1e-12, || format!("joint {i}: I = {mi}"))?;
        check(mi == mutual_information(&j.transpose()).unwrap(), || {
            format!("joint {i}: transpose changes I")
        })?;
        let gap = (mi
            - (entropy(&j.truth_marginal().unwrap()).unwrap() - conditional_entropy(&j).unwrap()))
        .abs();
        worst = worst.max(gap);
        check(gap <= 1e-12, || {
            format!("joint {i}: I − (H − H(·|·)) = {gap:e}")
        })?;
        check((mi - mi_from_counts(k, &table)).abs() <= 1e-12, || {
            format!("joint {i}: count oracle disagrees")
        })?;
        let n: u64 = table.iter().sum();
        let rows: Vec<f64> = (0..k)
            .map(|r| table[r * k..(r + 1) * k].iter().sum::<u64>() as f64 / n as f64)
            .collect();
        check(
            (entropy(&rows).unwrap() - entropy_bits(&rows)).abs() <= 1e-12,
            || "entropy oracle disagrees".into(),
        )?;
    }
    Ok(format!(
        "H(U8) = 3 exactly, max identity gap {worst:.1e} on 200 joints"
    ))
}

fn gradient_correctness() -> Outcome {
    let mut rng = Rng::new(0xA14);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let model = random_network(&mut rng);
        let batch = random_batch(&model, &mut rng);
        let err = gradient_check(&model, &batch, 1e-5, 1e-6);
        worst = worst.max(err);
        check(err <= 1e-5, || {
            format!("fixture {i}: relative error {err:e}")
        })?;
    }
    Ok(format!("max relative error {worst:.1e} over 20 fixtures"))
}

fn geometry_oracles() -> Outcome {
    let mut rng = Rng::new(0xA15);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (r, th) = (
            rng.uniform(0.3, 4.0).unwrap(),
            rng.uniform(-3.0, 3.0).unwrap(),
        );
        let g = christoffel(&Polar, &[r, th], 1e-4).map_err(|e| e.to_string())?;
        // Γ^r_θθ = −r, Γ^θ_rθ = Γ^θ_θr = 1/r, the rest vanish
        for l in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    let expected = match (l, a, b) {
                        (0, 1, 1) => -r,
                        (1, 0, 1) | (1, 1, 0) => 1.0 / r,
                        _ => 0.0,
                    };
                    worst = worst.max((g.get(l, a, b) - expected).abs());
                }
            }
        }
        let (x, y) = (
            rng.uniform(-3.0, 3.0).unwrap(),
            rng.uniform(0.3, 4.0).unwrap(),
        );
        let g = christoffel(&HalfPlane, &[x, y], 1e-4).map_err(|e| e.to_string())?;
        // Γ^x_xy = Γ^x_yx = −1/y, Γ^y_xx = 1/y, Γ^y_yy = −1/y
        for l in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    let expected = match (l, a, b) {
                        (0, 0, 1) | (0, 1, 0) => -1.0 / y,
                        (1, 0, 0) => 1.0 / y,
                        (1, 1, 1) => -1.0 / y,
                        _ => 0.0,
                    };
                    worst = worst.max((g.get(l, a, b) - expected).abs());
                }
            }
        }
    }
    check(worst <= 1e-5, || format!("Christoffel error {worst:e}"))?;

    let cfg = ShootingConfig {
        steps: 1000,
        method: Integrator::Rk4,
        ..ShootingConfig::default()
    };
    let d = geodesic_distance(&[-1.0, 1.0], &[1.0, 1.0], &HalfPlane, &cfg)
        .map_err(|e| e.to_string())?;
    let target = 3f64.acosh();
    check((d.distance - target).abs() <= 1e-3, || {
        format!("half-plane distance {} vs {target}", d.distance)
    })?;

    let path = integrate_geodesic(
        &[0.0, 1.0],
        &[1.0, 0.5],
        &HalfPlane,
        1e-3,
        1000,
        Integrator::Rk4,
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    let s0 = speed_squared(&HalfPlane, &path.points[0], &path.velocities[0]).unwrap();
    let drift = path
        .points
        .iter()
        .zip(&path.velocities)
        .map(|(x, v)| (speed_squared(&HalfPlane, x, v).unwrap() - s0).abs() / s0)
        .fold(0.0, f64::max);
    check(drift < 1e-4, || format!("speed drift {drift:e}"))?;

    // polar geodesics are Cartesian straight lines
    let (x0, v0) = ([1.0, 0.0], [0.3, 1.0]);
    let exact = {
        let (px, py): (f64, f64) = (1.0 + 0.3, 1.0);
        [(px * px + py * py).sqrt(), f64::atan2(py, px)]
    };
    let endpoint_error = |h: f64| {
        let steps = (1.0 / h).round() as usize;
        let p = integrate_geodesic(&x0, &v0, &Polar, h, steps, Integrator::Rk4, 1e-4).unwrap();
        let e = p.endpoint();
        ((e[0] - exact[0]).powi(2) + (e[1] - exact[1]).powi(2)).sqrt()
    };
    let (coarse, fine) = (endpoint_error(0.1), endpoint_error(0.05));
    let ratio = coarse / fine;
    check((8.0..=32.0).contains(&ratio), || {
        format!("rk4 halving ratio {ratio:.2} ({coarse:e} / {fine:e})")
    })?;
    Ok(format!(
        "Γ error {worst:.1e}, d = {:.6} (arccosh 3 = {target:.6}), drift {drift:.1e}, rk4 ratio {ratio:.1}",
        d.distance
    ))
}

fn geometric_convergence() -> Outcome {
    let gd = |lambda: f64, eta: f64, x0: f64, n: usize| {
        let mut x = x0;
        let mut errors = Vec::with_capacity(n);
        for _ in 0..n {
            errors.push(x.abs());
            x -= eta * lambda * x;
        }
        errors
    };
    let r = estimate_rate(&gd(1.0, 0.1, 3.0, 60))
        .map_err(|e| e.to_string())?
        .estimated_rate;
    check((r - 0.9).abs() <= 1e-9, || format!("estimated rate {r}"))?;

    let mut fixtures: Vec<Vec<f64>> = vec![
        gd(2.0, 0.1, 1.0, 40),
        gd(0.5, 0.5, -2.0, 40),
        gd(1.0, 1.5, 1.0, 40),
    ];
    // 2-D quadratic with anisotropic curvature; distance to the minimum
    let (mut x, mut y) = (1.0f64, -2.0f64);
    let mut errs = Vec::new();
    for _ in 0..80 {
        errs.push((x * x + y * y).sqrt());
        x -= 0.2 * 1.0 * x;
        y -= 0.2 * 4.0 * y;
    }
    fixtures.push(errs);
    for (i, f) in fixtures.iter().enumerate() {
        let r = estimate_rate(f).map_err(|e| e.to_string())?.estimated_rate;
        check(r < 1.0, || format!("contracting fixture {i}: r = {r}"))?;
    }
    Ok(format!(
        "r = {r:.12} for ½x², {} contracting fixtures below 1",
        fixtures.len()
    ))
}

fn curriculum_structure() -> Outcome {
    let mut rng = Rng::new(0xA17);
    let mut cases = 0;
    for n in [1, 2, 3, 5, 7, 10, 19, 64, 101, 250, 512, 999, 1000] {
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample {
                level: rng.unit(),
                ..Sample::clean(DenseArray::zeros(vec![1]), 0, i)
            })
            .collect();
        for stages in 1..=20 {
            let s = CurriculumSchedule::new(samples.clone(), stages).map_err(|e| e.to_string())?;
            let mut prev: Option<(usize, f64)> = None;
            for t in 1..=stages {
                let subset = s.stage_subset(t).unwrap();
                let expected = (t * n).div_ceil(stages);
                check(
                    subset.len() == expected && stage_size(t, n, stages) == expected,
                    || {
                        format!(
                            "n = {n}, T = {stages}, t = {t}: {} vs ⌈tn/T⌉ = {expected}",
                            subset.len()
                        )
                    },
                )?;
                let max = subset.iter().map(difficulty).fold(0.0, f64::max);
                if let Some((len, prev_max)) = prev {
                    check(s.stage_subset(t - 1).unwrap() == &subset[..len], || {
                        format!("n = {n}, T = {stages}: stage {t} not nested")
                    })?;
                    check(max >= prev_max, || {
                        format!("n = {n}, T = {stages}: difficulty drops at {t}")
                    })?;
                }
                prev = Some((subset.len(), max));
            }
            check(s.stage_subset(stages).unwrap().len() == n, || {
                format!("n = {n}, T = {stages}: n_T != n")
            })?;
            check(
                s.ordered()
                    .windows(2)
                    .all(|w| difficulty(&w[0]) <= difficulty(&w[1])),
                || "unsorted".into(),
            )?;
            cases += 1;
        }
    }
    Ok(format!("{cases} (n, T) cases"))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let mut base_clean = Vec::new();
    let mut base_occ = Vec::new();
    let mut pros_occ = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in 0..5 {
        for strategy in [Strategy::Baseline, Strategy::Pros] {
            let cfg = RunConfig {
                strategy,
                seed,
                ..RunConfig::default()
            };
            let t = Instant::now();
            let out = pipeline::run(&cfg).map_err(|e| e.to_string())?;
            slowest = slowest.max(t.elapsed());
            if strategy == Strategy::Baseline {
                base_clean.push(out.clean().accuracy);
                base_occ.push(out.occluded().accuracy);
            } else {
                pros_occ.push(out.occluded().accuracy);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (clean, b_occ, p_occ) = (mean(&base_clean), mean(&base_occ), mean(&pros_occ));
    check(clean >= 90.0, || {
        format!("baseline clean accuracy {clean:.2}% < 90%")
    })?;
    check(p_occ - b_occ >= 2.0, || {
        format!("PROS occluded {p_occ:.2}% vs baseline {b_occ:.2}%")
    })?;
    check(slowest < Duration::from_secs(300), || {
        format!("slowest run took {slowest:?}")
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = pipeline::run(&RunConfig::default()).map_err(|e| e.to_string())?;
    let run_dir = pipeline::write_run(&out, dir.path()).map_err(|e| e.to_string())?;
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let header = csv.lines().next().unwrap_or_default();
    check(
        header == "Strategy,Dataset,Precision,Recall,F1-Score,ROC-AUC,Accuracy",
        || format!("header {header:?}"),
    )?;
    Ok(format!(
        "baseline clean {clean:.2}%, occluded@0.3 baseline {b_occ:.2}% vs PROS {p_occ:.2}% (+{:.2}), slowest run {slowest:.2?}, total {:.2?}",
        p_occ - b_occ,
        start.elapsed()
    ))
}

fn occl(root: &Path, args: &[&str]) -> Result<Vec<PathBuf>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_occl"))
        .arg("--output-root")
        .arg(root)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "occl {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(PathBuf::from)
        .collect())
}

fn reproducibility() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for args in [
        &[
            "train",
            "--strategy",
            "pros",
            "--variant",
            "wcl",
            "--seed",
            "3",
        ][..],
        &[
            "train",
            "--strategy",
            "pbos",
            "--variant",
            "gcl",
            "--seed",
            "4",
        ][..],
    ] {
        let a = occl(root.path(), args)?;
        let b = occl(root.path(), args)?;
        check(a[0] != b[0], || "both runs wrote the same directory".into())?;
        for file in ["checkpoint.json", "metrics.csv"] {
            let (x, y) = (fs::read(a[0].join(file)), fs::read(b[0].join(file)));
            let (x, y) = (x.map_err(|e| e.to_string())?, y.map_err(|e| e.to_string())?);
            check(x == y, || {
                format!("{file} differs between runs of {args:?}")
            })?;
            compared += 1;
        }
    }
    Ok(format!("{compared} file pairs bit-identical"))
}

fn ial_constraint() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut dirs = Vec::new();
    for (variant, strategy, alpha) in [
        ("ial", "pros", "0.5"),
        ("ial", "pbos", "0.3"),
        ("gcl", "pros", "0.2"),
    ] {
        dirs.extend(occl(
            root.path(),
            &[
                "train",
                "--variant",
                variant,
                "--strategy",
                strategy,
                "--alpha",
                alpha,
                "--seeds",
                "0..3",
            ],
        )?);
    }
    let (mut selections, mut masks) = (0, 0);
    let mut highest: f64 = 0.0;
    for dir in &dirs {
        let log = fs::read_to_string(dir.join("log.jsonl")).map_err(|e| e.to_string())?;
        let cfg: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.join("config.json")).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let alpha = cfg["alpha"].as_f64().ok_or("config without alpha")?;
        for line in log.lines() {
            let event: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
            match event["event"].as_str() {
                Some("stage") => {
                    let level = event["selected_level"]
                        .as_f64()
                        .ok_or_else(|| format!("{}: stage without a selection", dir.display()))?;
                    highest = highest.max(level / alpha);
                    check(level <= alpha, || {
                        format!("{}: selected {level} > α = {alpha}", dir.display())
                    })?;
                    selections += 1;
                }
                Some("mask") if event["phase"] == "reocclude" => {
                    let area = event["height"].as_f64().unwrap() * event["width"].as_f64().unwrap();
                    let hidden = event["zeros"].as_array().map_or(0, |z| z.len()) as f64 / area;
                    check(hidden <= alpha + 1e-12, || {
                        format!("{}: mask hides {hidden} > α = {alpha}", dir.display())
                    })?;
                    masks += 1;
                }
                _ => {}
            }
        }
    }
    check(selections > 0, || "no selections logged".into())?;
    Ok(format!(
        "{} runs, {selections} selections (max level/α {highest:.2}), {masks} re-occlusion masks within α",
        dirs.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 transport oracle equivalence", transport_oracle),
        ("2 sinkhorn convergence", sinkhorn_convergence),
        ("3 information identities", information_identities),
        ("4 gradient correctness", gradient_correctness),
        ("5 geometry oracles", geometry_oracles),
        ("6 geometric convergence", geometric_convergence),
        ("7 curriculum structure", curriculum_structure),
        ("8 end-to-end directional check", end_to_end),
        ("9 reproducibility", reproducibility),
        ("10 IAL constraint", ial_constraint),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
