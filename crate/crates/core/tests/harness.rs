mod common;

use trajcast::data::{Maneuver, SyntheticConfig};
use trajcast::harness::*;
use trajcast::numerics::Tensor;
use trajcast::predictor::{point_forecast, LossMode};
use trajcast::preprocess::{VehicleHistory, VehicleState, Window};
use trajcast::Error;

fn errors_for(forecasts: &[Vec<[f64; 2]>], truths: &[Vec<[f64; 2]>]) -> Vec<WindowErrors> {
    forecasts
        .iter()
        .zip(truths)
        .enumerate()
        .map(|(i, (f, t))| WindowErrors {
            ego_id: i as u64,
            t: 0,
            errors_ft: horizon_errors(f, t, &[4, 9, 14, 19, 24]).unwrap(),
        })
        .collect()
}

fn random_truths(n: usize, seed: u64) -> Vec<Vec<[f64; 2]>> {
    use rand::Rng;
    let mut rng = common::rng(seed);
    (0..n)
        .map(|_| (0..25).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(0.0..300.0)]).collect())
        .collect()
}

#[test]
fn perfect_forecast_scores_zero() {
    let truths = random_truths(10, 1);
    let r = MetricsReport::from_errors("x", &errors_for(&truths, &truths), None, None, "c", "d").unwrap();
    assert_eq!(r.rmse_m, vec![0.0; 5]);
    assert_eq!(r.horizons_s, vec![1, 2, 3, 4, 5]);
    assert_eq!(r.samples, 10);
}

#[test]
fn one_metre_offset_scores_one_metre() {
    let truths = random_truths(10, 2);
    let off = 1.0 / FEET_TO_METERS;
    let shifted: Vec<Vec<[f64; 2]>> = truths
        .iter()
        .enumerate()
        .map(|(i, t)| {
            // alternate the offset direction; only its length matters
            let (dx, dy) = if i % 2 == 0 { (off, 0.0) } else { (0.6 * off, -0.8 * off) };
            t.iter().map(|p| [p[0] + dx, p[1] + dy]).collect()
        })
        .collect();
    let r = MetricsReport::from_errors("x", &errors_for(&shifted, &truths), None, None, "c", "d").unwrap();
    for v in &r.rmse_m {
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }
    assert!(r.to_csv().starts_with("horizon,rmse_m\n1,"));
}

#[test]
fn rmse_is_root_mean_square_over_windows() {
    let w = |e: f64| WindowErrors {
        ego_id: 0,
        t: 0,
        errors_ft: vec![e, 2.0 * e],
    };
    let r = rmse_ft(&[w(3.0), w(4.0)]).unwrap();
    assert!((r[0] - 12.5f64.sqrt()).abs() < 1e-12 && (r[1] - 50.0f64.sqrt()).abs() < 1e-12);
    assert!(rmse_ft(&[]).is_err());
    assert!(horizon_errors(&[[0.0, 0.0]; 3], &[[0.0, 0.0]; 3], &[4]).is_err());
}

fn straight_window(speed_ft_per_frame: f64, lateral: f64) -> Window {
    let states = (0..16)
        .map(|k| {
            let back = (15 - k) as f64;
            VehicleState::from_array([-lateral * back, -speed_ft_per_frame * back, 0.0, 0.0, 0.0, 0.0, 6.0, 15.0, 2.0, 2.0])
        })
        .collect();
    Window {
        ego_id: 1,
        t: 0,
        vehicles: vec![VehicleHistory {
            vehicle_id: 1,
            states,
            padded: 0,
        }],
        future: (1..=25).map(|k| [lateral * k as f64, speed_ft_per_frame * k as f64]).collect(),
        label: Maneuver::Keep,
    }
}

#[test]
fn constant_velocity_baseline() {
    for (v, lat) in [(12.0, 0.0), (9.5, 0.3), (0.0, 0.0)] {
        let w = straight_window(v, lat);
        let f = cv_baseline(&w).unwrap();
        for (p, t) in f.iter().zip(&w.future) {
            assert!((p[0] - t[0]).abs() < 1e-12 && (p[1] - t[1]).abs() < 1e-12);
        }
    }
    let cfg = common::small_experiment(0);
    let (r, _) = evaluate_baseline(&[straight_window(12.0, 0.0), straight_window(0.0, 0.0)], &cfg).unwrap();
    assert!(r.rmse_m.iter().all(|v| *v < 1e-12));
    assert_eq!(r.variant, "CV");
    let mut short = straight_window(1.0, 0.0);
    short.vehicles[0].states.truncate(1);
    assert!(matches!(cv_baseline(&short), Err(Error::Baseline(_))));
}

#[test]
fn evaluation_matches_recomputation() {
    let mut cfg = common::small_experiment(3);
    cfg.preprocess.max_windows = Some(40);
    let (exp, bundle) = run_experiment(&cfg).unwrap();
    let test = prepare(&bundle.test, &exp.pipeline, &cfg).unwrap();
    let mut sq = [0.0; 5];
    for w in &test {
        let f = point_forecast(&exp.model.predict(w).unwrap());
        for (h, k) in [4, 9, 14, 19, 24].iter().enumerate() {
            sq[h] += (f[*k][0] - w.future[*k][0]).powi(2) + (f[*k][1] - w.future[*k][1]).powi(2);
        }
    }
    for (h, s) in sq.iter().enumerate() {
        let expect = (s / test.len() as f64).sqrt() * 0.3048;
        assert!((exp.report.rmse_m[h] - expect).abs() < 1e-9 * expect.max(1.0));
    }
    assert_eq!(exp.report.samples, bundle.test.len());
    assert_eq!(exp.report.data_hash, bundle.data_hash);
    assert!(exp.report.nll.unwrap().is_finite());
    assert!(exp.report.wall_time_s.is_none());
}

#[test]
fn runs_are_deterministic() {
    let mut cfg = common::small_experiment(4);
    cfg.preprocess.max_windows = Some(30);
    let (a, _) = run_experiment(&cfg).unwrap();
    let (b, _) = run_experiment(&cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
}

#[test]
fn both_loss_modes_train() {
    let mut cfg = common::small_experiment(5);
    cfg.preprocess.max_windows = Some(30);
    cfg.training.epochs = 4;
    let mut reports = Vec::new();
    for mode in [LossMode::Mixture, LossMode::Teacher] {
        cfg.training.loss_mode = mode;
        let (exp, _) = run_experiment(&cfg).unwrap();
        assert!(exp.log.iter().all(|l| l.train_loss.is_finite()));
        assert!(exp.log.last().unwrap().train_loss < exp.log[0].train_loss, "{mode:?}: {:?}", exp.log);
        reports.push(exp.report);
    }
    assert_ne!(reports[0].rmse_m, reports[1].rmse_m);
    assert_ne!(reports[0].config_hash, reports[1].config_hash);
    assert_eq!(reports[0].data_hash, reports[1].data_hash);
}

#[test]
fn variants_select_their_features() {
    let cfg = common::small_experiment(0);
    let dims: Vec<(usize, bool)> = Variant::ALL
        .iter()
        .map(|&v| {
            let c = ExperimentConfig { variant: v, ..cfg.clone() }.model_config();
            (c.input_dim, c.ssae_sizes.is_some())
        })
        .collect();
    assert_eq!(dims, vec![(2, false), (7, false), (10, false), (10, true)]);
    assert_eq!(Variant::KModel.feature_mask(), vec![0, 1, 2, 3, 4, 5, 9]);
    assert_eq!(Variant::parse("vd+dcs-lstm").unwrap(), Variant::VdDcsLstm);
    match Variant::parse("LSTM-9000") {
        Err(Error::Config(m)) => assert!(m.contains("LSTM-9000")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn ablation_shares_one_dataset() {
    let mut cfg = common::small_experiment(6);
    cfg.preprocess.max_windows = Some(30);
    let reports = ablate(&cfg, &Variant::ALL).unwrap();
    assert_eq!(reports.len(), 4);
    let tags: Vec<&str> = reports.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(tags, vec!["DCS-LSTM", "K-Model", "MM-Model", "VD+DCS-LSTM"]);
    assert!(reports.iter().all(|r| r.data_hash == reports[0].data_hash && r.samples == reports[0].samples));
    let table = comparison_csv(&reports);
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("variant,rmse_1s_m,"));
    let svg = rmse_svg(&reports);
    assert!(svg.starts_with("<svg") && tags.iter().all(|t| svg.contains(t)));
}

#[test]
fn config_round_trip_and_validation() {
    let cfg = common::small_experiment(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    cfg.save(&path).unwrap();
    let back = ExperimentConfig::load(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let mut other = cfg.clone();
    other.training.lr *= 2.0;
    assert_ne!(other.hash(), cfg.hash());
    assert_eq!(other.data_hash(), cfg.data_hash());
    let mut bad = cfg.clone();
    bad.preprocess.future = 10;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = cfg;
    bad.training.batch_size = 0;
    assert!(bad.validate().is_err());
    assert_eq!(ExperimentConfig::synthetic(SyntheticConfig::default(), 0).preprocess.horizon_indices(), vec![4, 9, 14, 19, 24]);
}

#[test]
fn separable_filter_and_lane_change_share() {
    let mut cfg = common::small_experiment(7);
    cfg.preprocess.separable = Some(SeparableFilter {
        min_change_lateral_ft: 1.0,
        max_keep_lateral_ft: 0.5,
    });
    cfg.preprocess.lane_change_fraction = Some(0.3);
    let ds = build_dataset(&cfg).unwrap();
    for w in &ds.windows {
        let d = history_lateral_motion(w);
        match w.label {
            Maneuver::Keep => assert!(d.abs() <= 0.5),
            Maneuver::Left => assert!(d <= -1.0),
            Maneuver::Right => assert!(d >= 1.0),
        }
    }
    let changes = ds.windows.iter().filter(|w| w.label != Maneuver::Keep).count() as f64;
    let share = changes / ds.windows.len() as f64;
    assert!((share - 0.3).abs() < 0.05, "share {share} of {}", ds.windows.len());
}

#[test]
fn gradient_clipping_rescales_jointly() {
    let mut grads = vec![Some(Tensor::new(&[2], vec![3.0, 0.0]).unwrap()), None, Some(Tensor::new(&[1], vec![4.0]).unwrap())];
    let norm = clip_global_norm(&mut grads, 1.0);
    assert_eq!(norm, 5.0);
    assert!((grads[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
    assert!((grads[2].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
    let mut small = vec![Some(Tensor::new(&[1], vec![0.5]).unwrap())];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].as_ref().unwrap().data()[0], 0.5);
}
