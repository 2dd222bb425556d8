mod common;

use rand::Rng;
use trajcast::data::{gen_synthetic, SyntheticConfig};
use trajcast::preprocess::*;
use trajcast::social::GridSpec;

/// Cyclic Jacobi eigen-decomposition of a small symmetric matrix; returns
/// eigenvalues and column eigenvectors (row-major `d×d`).
fn jacobi(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * d + j].powi(2)).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

fn covariance(samples: &[Vec<f64>]) -> (Vec<f64>, usize) {
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / n).collect();
    let mut c = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] += (s[i] - mean[i]) * (s[j] - mean[j]) / n;
            }
        }
    }
    (c, d)
}

fn correlated_samples(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = common::rng(seed);
    // well-conditioned mixing so every eigenvalue sits far above epsilon
    let mix: Vec<f64> = (0..d * d)
        .map(|k| if k % (d + 1) == 0 { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3))
        .collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (0..d).map(|i| 0.3 * (0..d).map(|j| mix[i * d + j] * z[j]).sum::<f64>() + 0.5).collect()
        })
        .collect()
}

#[test]
fn whitening_matches_eigen_oracle() {
    let eps = DEFAULT_ZCA_EPSILON;
    let samples = correlated_samples(3000, NUM_FEATURES, 21);
    let w = WhiteningParams::fit(&samples, eps).unwrap();
    let out: Vec<Vec<f64>> = samples.iter().map(|s| w.apply(s)).collect();
    let (c_out, d) = covariance(&out);
    let (c_in, _) = covariance(&samples);
    let (lambda, u) = jacobi(c_in, d);
    for i in 0..d {
        for j in 0..d {
            // whitened covariance is U diag(λ/(λ+ε)) Uᵀ
            let expect: f64 = (0..d).map(|k| u[i * d + k] * u[j * d + k] * lambda[k] / (lambda[k] + eps)).sum();
            assert!((c_out[i * d + j] - expect).abs() < 1e-8, "({i},{j}) {} vs {expect}", c_out[i * d + j]);
            if i != j {
                assert!(c_out[i * d + j].abs() < 1e-3);
            }
        }
    }
    // ZCA is the symmetric whitening: matrix = U (Λ+ε)^(-1/2) Uᵀ
    for i in 0..d {
        for j in 0..d {
            let expect: f64 = (0..d).map(|k| u[i * d + k] * u[j * d + k] / (lambda[k] + eps).sqrt()).sum();
            assert!((w.matrix[i * d + j] - expect).abs() < 1e-6 * expect.abs().max(1.0), "W({i},{j})");
        }
    }
}

#[test]
fn strongly_correlated_pair_is_decorrelated() {
    let mut rng = common::rng(2);
    let samples: Vec<Vec<f64>> = (0..4000)
        .map(|_| {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            vec![a, 0.9 * a + (1.0f64 - 0.81).sqrt() * b]
        })
        .collect();
    let (c, _) = covariance(&samples);
    assert!(c[1] / (c[0] * c[3]).sqrt() > 0.85);
    let w = WhiteningParams::fit(&samples, 1e-5).unwrap();
    let out: Vec<Vec<f64>> = samples.iter().map(|s| w.apply(s)).collect();
    let (c, _) = covariance(&out);
    assert!(c[1].abs() < 1e-3, "{c:?}");
    assert!((c[0] - 1.0).abs() < 1e-3 && (c[3] - 1.0).abs() < 1e-3, "{c:?}");
}

#[test]
fn whitening_rejects_bad_input() {
    assert!(WhiteningParams::fit(&[vec![1.0, 2.0], vec![2.0, 3.0]], 1e-5).is_err());
    assert!(WhiteningParams::fit(&correlated_samples(50, 3, 1), 0.0).is_err());
}

#[test]
fn minmax_round_trip_and_clipping() {
    let samples = correlated_samples(200, 4, 5);
    let mm = MinMaxParams::fit(&samples).unwrap();
    for s in &samples {
        let scaled = mm.apply(s);
        assert!(scaled.iter().all(|v| (0.0..=1.0).contains(v)));
        for (a, b) in mm.invert(&scaled).iter().zip(s) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let outside: Vec<f64> = mm.max.iter().map(|m| m + 10.0).collect();
    assert_eq!(mm.apply(&outside), vec![1.0; 4]);
    let below: Vec<f64> = mm.min.iter().map(|m| m - 10.0).collect();
    assert_eq!(mm.apply(&below), vec![0.0; 4]);
    assert!(MinMaxParams::fit(&samples[..1]).is_err());
}

fn scene_for(cfg: &SyntheticConfig, seed: u64, shift_y: f64) -> Scene {
    let mut tracks = gen_synthetic(cfg, seed).unwrap();
    for f in tracks.iter_mut().flat_map(|t| &mut t.frames) {
        f.y += shift_y;
    }
    let tracks: Vec<_> = tracks.iter().map(|t| downsample_aligned(t, 2).unwrap()).collect();
    Scene::new(tracks, &LaneTable::uniform(cfg.lanes, cfg.lane_width), 2).unwrap()
}

#[test]
fn windows_have_expected_shapes() {
    let cfg = SyntheticConfig {
        vehicles: 20,
        road_length: 300.0,
        ..Default::default()
    };
    let grid = GridSpec::default();
    let (windows, stats) = build_windows(&scene_for(&cfg, 3, 0.0), 3, DEFAULT_HISTORY, DEFAULT_FUTURE, &grid);
    assert!(stats.built > 20 && stats.built == windows.len());
    assert!(windows.iter().any(|w| w.vehicles.len() > 1));
    for w in &windows {
        assert_eq!(w.future.len(), DEFAULT_FUTURE);
        let ego = w.ego();
        assert_eq!((ego.vehicle_id, ego.padded), (w.ego_id, 0));
        let now = ego.states.last().unwrap();
        assert_eq!((now.x, now.y), (0.0, 0.0));
        for v in &w.vehicles {
            assert_eq!(v.states.len(), DEFAULT_HISTORY);
            assert!(grid.assign_cell(v.states.last().unwrap(), now).is_some());
            // padding repeats the first observed frame
            for s in &v.states[..v.padded] {
                assert_eq!(s, &v.states[v.padded]);
            }
        }
    }
}

#[test]
fn windows_ignore_longitudinal_translation() {
    let cfg = SyntheticConfig {
        vehicles: 12,
        road_length: 300.0,
        noise_sigma: 0.2,
        ..Default::default()
    };
    let grid = GridSpec::default();
    let (a, _) = build_windows(&scene_for(&cfg, 9, 0.0), 4, DEFAULT_HISTORY, DEFAULT_FUTURE, &grid);
    let (b, _) = build_windows(&scene_for(&cfg, 9, 5000.0), 4, DEFAULT_HISTORY, DEFAULT_FUTURE, &grid);
    assert_eq!(a.len(), b.len());
    for (wa, wb) in a.iter().zip(&b) {
        assert_eq!((wa.ego_id, wa.t, wa.label, wa.vehicles.len()), (wb.ego_id, wb.t, wb.label, wb.vehicles.len()));
        for (fa, fb) in wa.future.iter().zip(&wb.future) {
            assert!((fa[0] - fb[0]).abs() < 1e-9 && (fa[1] - fb[1]).abs() < 1e-9);
        }
        for (va, vb) in wa.vehicles.iter().zip(&wb.vehicles) {
            for (sa, sb) in va.states.iter().zip(&vb.states) {
                for (x, y) in sa.to_array().iter().zip(sb.to_array()) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn params_save_load_and_mask() {
    let cfg = SyntheticConfig::default();
    let tracks = gen_synthetic(&cfg, 1).unwrap();
    let lanes = LaneTable::uniform(cfg.lanes, cfg.lane_width);
    let states: Vec<VehicleState> = tracks.iter().flat_map(|t| track_states(t, &lanes).unwrap()).collect();
    let p = PreprocessParams::fit(&states, &[0, 1, 3], Some(1e-5)).unwrap();
    assert_eq!(p.dim(), 3);
    assert_eq!(p.features, vec!["x", "y", "v"]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.json");
    p.save(&path).unwrap();
    let back = PreprocessParams::load(&path).unwrap();
    assert_eq!(back, p);
    assert_eq!(back.apply(&states[7]), p.apply(&states[7]));
    assert!(PreprocessParams::fit(&states, &[10], None).is_err());
}

#[test]
fn heading_and_downsampling() {
    let cfg = SyntheticConfig {
        vehicles: 1,
        lane_change_prob: 0.0,
        ..Default::default()
    };
    let t = &gen_synthetic(&cfg, 2).unwrap()[0];
    for i in 0..t.len() {
        assert!(heading_angle(t, i).unwrap().abs() < 1e-12);
    }
    let d = downsample(t, 4).unwrap();
    assert_eq!(d.len(), t.len().div_ceil(4));
    assert!(d.frames.iter().zip(t.frames.iter().step_by(4)).all(|(a, b)| a == b));
    assert!(downsample(t, 0).is_err());
}
