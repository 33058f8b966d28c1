//! Library routines against independent reference computations.

mod common;

use common::*;
use occl_core::curriculum::{
    expand_levels, linear_levels, occlude_sample, CurriculumSchedule, OcclusionStrategy, Sample,
};
use occl_core::datasets::{generate_synthetic, TaskSpec};
use occl_core::infotheory::{select_occlusion_level, IalConfig, Predictor};
use occl_core::occlusion::{bin_index, SizeRule};
use occl_core::tensor::Rng;
use occl_core::trainer::{
    default_layers, train_curriculum, Activation, Checkpoint, CurriculumTrainConfig,
    HeadProjection, LayerSpec, LossConfig, LossVariant, ModelState, SgdConfig, TrainReport,
    PROJECTION_STREAM,
};
use occl_core::transport::{solve_transport, CostMatrix};

#[test]
fn exact_solver_matches_basis_enumeration() {
    let mut rng = Rng::new(11);
    for case in 0..60 {
        let b = 2 + case % 3;
        let p = random_histogram(b, &mut rng);
        let q = random_histogram(b, &mut rng);
        let c = random_cost(b, &mut rng);
        let cost = CostMatrix::new(b, c.clone()).unwrap();
        let (_, objective) = solve_transport(&p, &q, &cost).unwrap();
        let oracle = basis_enumeration_ot(p.masses(), q.masses(), &c);
        assert!(
            (objective - oracle).abs() <= 1e-9,
            "case {case}: {objective} vs {oracle}"
        );
    }
}

#[test]
fn exact_solver_matches_enumeration_at_five_bins() {
    let mut rng = Rng::new(12);
    for _ in 0..2 {
        let p = random_histogram(5, &mut rng);
        let q = random_histogram(5, &mut rng);
        let c = random_cost(5, &mut rng);
        let (_, objective) =
            solve_transport(&p, &q, &CostMatrix::new(5, c.clone()).unwrap()).unwrap();
        assert!((objective - basis_enumeration_ot(p.masses(), q.masses(), &c)).abs() <= 1e-9);
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = Rng::new(21);
    for fixture in 0..20 {
        let model = random_network(&mut rng);
        let batch = random_batch(&model, &mut rng);
        let err = gradient_check(&model, &batch, 1e-5, 1e-6);
        assert!(err <= 1e-5, "fixture {fixture}: relative error {err}");
    }
}

fn glyph_fixture(n: usize, seed: u64) -> Vec<Sample> {
    let spec = TaskSpec {
        height: 8,
        width: 8,
        k: 2,
        n,
        ..TaskSpec::default()
    };
    generate_synthetic(&spec, &mut Rng::new(seed))
        .unwrap()
        .samples
}

#[test]
fn level_selection_matches_brute_force() {
    let probe = glyph_fixture(24, 3);
    for seed in 0..6 {
        let model = ModelState::init(default_layers(64, 2), seed).unwrap();
        let cfg = IalConfig::evenly_spaced(0.4, 5, 16).unwrap();
        let rng = Rng::new(100 + seed);
        let sel =
            select_occlusion_level(&model, &probe, &cfg, OcclusionStrategy::Areal, &rng).unwrap();

        let mut scored = Vec::new();
        for (c, &level) in cfg.candidate_levels.iter().enumerate() {
            let mut fork = rng.fork(c as u64);
            let mut counts = vec![0u64; 4];
            for s in &probe[..16] {
                let (occ, mask) = occlude_sample(
                    s,
                    level,
                    1,
                    OcclusionStrategy::Areal,
                    SizeRule::AtMost,
                    &mut fork,
                )
                .unwrap();
                let hidden = mask.bits().iter().filter(|b| **b == 0).count() as f64 / 64.0;
                assert!(hidden <= level + 1e-12);
                counts[s.label * 2 + model.predict_class(&occ.image).unwrap()] += 1;
            }
            scored.push((level, mi_from_counts(2, &counts)));
        }
        let best = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let level = scored
            .iter()
            .filter(|s| s.1 >= best - 1e-12)
            .map(|s| s.0)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(
            sel.level, level,
            "seed {seed}: {:?} vs {scored:?}",
            sel.evaluations
        );
        assert!((sel.mi - best).abs() <= 1e-12);
        assert!(sel.level <= cfg.alpha);
    }
}

struct Fixture {
    clean: Vec<Sample>,
    schedule: CurriculumSchedule,
    initial: ModelState,
}

/// 10 clean glyphs plus two occluded copies each: 30 samples over 3 stages.
fn curriculum_fixture() -> Fixture {
    let clean = glyph_fixture(10, 7);
    let (expanded, _) = expand_levels(
        &clean,
        2,
        &linear_levels(2, 0.5),
        OcclusionStrategy::Areal,
        &mut Rng::new(8),
    )
    .unwrap();
    Fixture {
        schedule: CurriculumSchedule::new(expanded, 3).unwrap(),
        initial: ModelState::init(default_layers(64, 2), 9).unwrap(),
        clean,
    }
}

fn train(fx: &Fixture, loss: &LossConfig, seed: u64) -> TrainReport {
    let cfg = CurriculumTrainConfig {
        sgd: SgdConfig {
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 4,
        },
        stage_epochs: None,
        strategy: Some(OcclusionStrategy::Areal),
    };
    train_curriculum(
        &fx.initial,
        &fx.schedule,
        &fx.clean,
        &fx.clean,
        loss,
        &cfg,
        &mut Rng::new(seed),
    )
    .unwrap()
}

#[test]
fn three_stage_transport_curriculum() {
    let fx = curriculum_fixture();
    let loss = LossConfig::new(LossVariant::Wcl);
    let report = train(&fx, &loss, 1);
    assert_eq!(
        report.stages.iter().map(|s| s.size).collect::<Vec<_>>(),
        vec![10, 20, 30]
    );
    assert_eq!(report.snapshots.len(), 3);
    assert_eq!(report.stages[2].w1, None);
    for t in 1..3 {
        let hist = |stage: usize| {
            let levels: Vec<f64> = fx
                .schedule
                .stage_subset(stage)
                .unwrap()
                .iter()
                .map(|s| s.level)
                .collect();
            let mut h = vec![0.0; loss.bins];
            for l in &levels {
                h[bin_index(*l, loss.bins)] += 1.0 / levels.len() as f64;
            }
            h
        };
        let oracle = cdf_w1(&hist(t), &hist(t + 1));
        let r = &report.stages[t - 1];
        assert!((r.w1.unwrap() - oracle).abs() <= 1e-12, "stage {t}");
        let expected = r.data_loss + loss.lambda1 * oracle;
        assert!((r.breakdown.value - expected).abs() <= 1e-12);
    }
    let final_loss = report.stages[2].data_loss;
    assert!(final_loss.is_finite() && final_loss < report.stages[0].epoch_losses[0] + 1.0);
}

#[test]
fn identity_metric_geodesic_is_projected_distance() {
    let fx = curriculum_fixture();
    let mut loss = LossConfig::new(LossVariant::Gcl);
    loss.geometry.identity_metric = true;
    loss.ial = IalConfig::evenly_spaced(0.5, 3, 10).unwrap();
    let report = train(&fx, &loss, 2);
    let projection = HeadProjection::new(
        &fx.initial,
        loss.geometry.dim,
        &mut Rng::new(2).fork(PROJECTION_STREAM),
    )
    .unwrap();
    for t in 0..2 {
        let coords = projection.coordinates(&report.snapshots[t], &report.snapshots[t + 1]);
        let euclid = coords.iter().map(|c| c * c).sum::<f64>().sqrt();
        let l_geo = report.stages[t].l_geo.expect("identity solve succeeds");
        assert!(
            (l_geo - euclid).abs() <= 1e-6,
            "stage {}: {l_geo} vs {euclid}",
            t + 1
        );
    }
}

#[test]
fn full_rank_identity_geodesic_is_head_step() {
    let mut fx = curriculum_fixture();
    // 9 head parameters, so the projection can span the whole head
    fx.initial = ModelState::init(
        vec![
            LayerSpec::new(64, 8, Activation::Relu),
            LayerSpec::new(8, 1, Activation::Sigmoid),
        ],
        9,
    )
    .unwrap();
    let mut loss = LossConfig::new(LossVariant::Gcl);
    loss.geometry.identity_metric = true;
    loss.geometry.dim = fx.initial.head_param_count();
    loss.ial = IalConfig::evenly_spaced(0.5, 3, 10).unwrap();
    let report = train(&fx, &loss, 3);
    let off = fx.initial.head_offset();
    let n = fx.initial.head_param_count();
    for t in 0..2 {
        let (a, b) = (
            report.snapshots[t].params(),
            report.snapshots[t + 1].params(),
        );
        let step = (off..off + n)
            .map(|i| (b[i] - a[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((report.stages[t].l_geo.unwrap() - step).abs() <= 1e-6);
    }
}

#[test]
fn curvature_geodesic_is_at_least_euclidean() {
    // g = I + β·(PSD) dominates the identity, so lengths cannot shrink
    let fx = curriculum_fixture();
    let mut loss = LossConfig::new(LossVariant::Gcl);
    loss.ial = IalConfig::evenly_spaced(0.5, 3, 10).unwrap();
    let report = train(&fx, &loss, 4);
    let projection = HeadProjection::new(
        &fx.initial,
        loss.geometry.dim,
        &mut Rng::new(4).fork(PROJECTION_STREAM),
    )
    .unwrap();
    for t in 0..2 {
        let coords = projection.coordinates(&report.snapshots[t], &report.snapshots[t + 1]);
        let euclid = coords.iter().map(|c| c * c).sum::<f64>().sqrt();
        match (report.stages[t].l_geo, &report.stages[t].l_geo_error) {
            (Some(l), _) => assert!(l >= euclid - 1e-6, "{l} < {euclid}"),
            (None, e) => panic!("geodesic failed: {e:?}"),
        }
    }
}

#[test]
fn replay_is_bit_exact() {
    let fx = curriculum_fixture();
    for variant in [
        LossVariant::Plain,
        LossVariant::Wcl,
        LossVariant::Ial,
        LossVariant::Gcl,
    ] {
        let mut loss = LossConfig::new(variant);
        loss.ial = IalConfig::evenly_spaced(0.5, 3, 10).unwrap();
        let a = train(&fx, &loss, 5);
        let b = train(&fx, &loss, 5);
        let bits = |r: &TrainReport| {
            r.final_model()
                .params()
                .iter()
                .map(|p| p.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b), "{variant:?}");
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_ne!(bits(&a), bits(&train(&fx, &loss, 6)));
    }
}

#[test]
fn checkpoint_restores_training_state() {
    let fx = curriculum_fixture();
    let report = train(&fx, &LossConfig::new(LossVariant::Plain), 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::new(report.final_model(), report.rng_state)
        .save(&path)
        .unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let model = back.model().unwrap();
    assert_eq!(&model, report.final_model());
    let image = &fx.clean[0].image;
    assert_eq!(
        model.class_probabilities(image).unwrap(),
        report.final_model().class_probabilities(image).unwrap()
    );
    assert_eq!(
        Rng::from_state(back.rng).unit(),
        Rng::from_state(report.rng_state).unit()
    );
}
