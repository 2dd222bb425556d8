mod common;

use std::io::Write;

use proptest::prelude::*;
use trajcast::data::*;
use trajcast::Error;

const HEADER: &str = "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,v_Acc,Lane_ID,v_Class,v_Width,v_Length";

fn write_file(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    std::fs::File::create(&path).unwrap().write_all(text.as_bytes()).unwrap();
    path
}

#[test]
fn two_rows_one_vehicle() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(&dir, "a.csv", &format!("{HEADER}\n7,100,6.0,50.0,40.0,0.5,1,2,6.0,15.0\n7,101,6.1,54.0,40.0,0.5,1,2,6.0,15.0\n"));
    let r = parse_ngsim(&p, "us101").unwrap();
    assert_eq!(r.tracks.len(), 1);
    assert_eq!(r.tracks[0].len(), 2);
    assert_eq!(r.tracks[0].vehicle_id, 7);
    assert_eq!(r.malformed, 0);
}

#[test]
fn column_order_is_free() {
    let dir = tempfile::tempdir().unwrap();
    let text = "Frame_ID,Vehicle_ID,Local_Y,Local_X,v_Acc,v_Vel,v_Class,Lane_ID,v_Length,v_Width,Extra\n\
                5,3,50.0,6.0,0.0,30.0,2,2,15.0,6.0,x\n";
    let r = parse_ngsim(&write_file(&dir, "b.csv", text), "s").unwrap();
    let f = r.tracks[0].frames[0];
    assert_eq!((f.frame_index, f.x, f.y, f.v, f.lane_id, f.width, f.length), (5, 6.0, 50.0, 30.0, 2, 6.0, 15.0));
}

#[test]
fn non_numeric_row_is_counted() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(
        &dir,
        "c.csv",
        &format!("{HEADER}\n1,1,abc,0,0,0,1,2,6,15\n1,2,6,0,0,0,1,2,6,15\n1,3,6,1,0,0,1,2,6,15\n"),
    );
    let r = parse_ngsim(&p, "s").unwrap();
    assert_eq!(r.malformed, 1);
    assert_eq!(r.tracks[0].len(), 2);
}

#[test]
fn frame_gap_splits_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = format!("{HEADER}\n");
    for f in [1, 2, 3, 7, 8, 12] {
        text.push_str(&format!("4,{f},6,{f},0,0,1,2,6,15\n"));
    }
    let r = parse_ngsim(&write_file(&dir, "d.csv", &text), "s").unwrap();
    let runs: Vec<Vec<i64>> = r
        .tracks
        .iter()
        .map(|t| t.frames.iter().map(|f| f.frame_index).collect())
        .collect();
    assert_eq!(runs, vec![vec![1, 2, 3], vec![7, 8], vec![12]]);
}

#[test]
fn missing_column_and_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(&dir, "e.csv", "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,v_Acc,Lane_ID,v_Class,v_Width\n1,1,1,1,1,1,1,1,1\n");
    match parse_ngsim(&p, "s") {
        Err(Error::MissingColumn(c)) => assert_eq!(c, "v_Length"),
        other => panic!("{other:?}"),
    }
    let p = write_file(&dir, "f.csv", "");
    assert!(matches!(parse_ngsim(&p, "s"), Err(Error::Format(_))));
    let p = write_file(&dir, "g.csv", &format!("{HEADER}\n"));
    assert!(matches!(parse_ngsim(&p, "s"), Err(Error::Format(_))));
}

#[test]
fn csv_and_store_round_trips() {
    let cfg = SyntheticConfig {
        vehicles: 6,
        duration_s: 4.0,
        noise_sigma: 0.3,
        ..Default::default()
    };
    let tracks = gen_synthetic(&cfg, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rt.csv");
    write_ngsim(&tracks, &p).unwrap();
    let back = parse_ngsim(&p, "synthetic").unwrap();
    assert_eq!(back.malformed, 0);
    assert_eq!(back.tracks, tracks);
    let s = dir.path().join("rt.ndjson");
    write_store(&tracks, &s).unwrap();
    assert_eq!(read_store(&s).unwrap(), tracks);
}

#[test]
fn constant_velocity_without_noise_or_changes() {
    let cfg = SyntheticConfig {
        vehicles: 8,
        lane_change_prob: 0.0,
        noise_sigma: 0.0,
        duration_s: 6.0,
        ..Default::default()
    };
    for t in gen_synthetic(&cfg, 3).unwrap() {
        let f0 = t.frames[0];
        for f in &t.frames {
            let time = f.frame_index as f64 / cfg.rate_hz;
            assert!((f.y - (f0.y + f.v * time)).abs() < 1e-9, "vehicle {}", t.vehicle_id);
            assert_eq!(f.x, f0.x);
            assert_eq!(f.lane_id, f0.lane_id);
        }
    }
}

#[test]
fn lane_change_matches_profile() {
    let cfg = SyntheticConfig {
        vehicles: 30,
        lane_change_prob: 1.0,
        noise_sigma: 0.0,
        duration_s: 15.0,
        ..Default::default()
    };
    let tracks = gen_synthetic(&cfg, 9).unwrap();
    for t in &tracks {
        let (first, last) = (t.frames[0], *t.frames.last().unwrap());
        let moved = last.x - first.x;
        assert!((moved.abs() - cfg.lane_width).abs() < 1e-9, "lateral move {moved}");
        assert_eq!(last.lane_id - first.lane_id, moved.signum() as i32);
        // lane id switches exactly once, when half the move is done
        let switch = t.frames.iter().position(|f| f.lane_id != first.lane_id).unwrap();
        let done = (t.frames[switch].x - first.x).abs() / cfg.lane_width;
        let before = (t.frames[switch - 1].x - first.x).abs() / cfg.lane_width;
        assert!(done >= 0.5 && before < 0.5, "{before} → {done}");
        assert!(t.frames[switch..].iter().all(|f| f.lane_id == last.lane_id));
        assert!(last.lane_id >= 1 && last.lane_id <= cfg.lanes);
    }
    assert!((lateral_profile(0.0)).abs() < 1e-12 && (lateral_profile(1.0) - 1.0).abs() < 1e-12);
    assert!((lateral_profile(0.5) - 0.5).abs() < 1e-12);
}

#[test]
fn stored_speed_matches_noisy_positions() {
    let sigma = 0.2;
    let cfg = SyntheticConfig {
        vehicles: 20,
        noise_sigma: sigma,
        ..Default::default()
    };
    let mut sq = 0.0;
    let mut n = 0.0;
    for t in gen_synthetic(&cfg, 4).unwrap() {
        for w in t.frames.windows(2) {
            let fd = (w[1].x - w[0].x).hypot(w[1].y - w[0].y) * cfg.rate_hz;
            sq += (fd - w[1].v).powi(2);
            n += 1.0;
        }
    }
    let rms = (sq / n).sqrt();
    assert!(rms <= 3.0 * sigma * cfg.rate_hz, "rms {rms}");
}

#[test]
fn generator_is_deterministic_and_validates() {
    let cfg = SyntheticConfig {
        noise_sigma: 0.5,
        ..Default::default()
    };
    assert_eq!(gen_synthetic(&cfg, 1).unwrap(), gen_synthetic(&cfg, 1).unwrap());
    assert_ne!(gen_synthetic(&cfg, 1).unwrap(), gen_synthetic(&cfg, 2).unwrap());
    let bad = SyntheticConfig { lanes: 0, ..cfg };
    assert!(matches!(gen_synthetic(&bad, 1), Err(Error::Config(_))));
}

#[test]
fn labels_ignore_translation() {
    let cfg = SyntheticConfig {
        vehicles: 10,
        lane_change_prob: 0.7,
        ..Default::default()
    };
    for t in gen_synthetic(&cfg, 8).unwrap() {
        let mut moved = t.clone();
        for f in &mut moved.frames {
            f.x += 123.0;
            f.y -= 4567.0;
        }
        for i in (0..t.len() - 50).step_by(7) {
            assert_eq!(label_maneuver(&t, i, 50), label_maneuver(&moved, i, 50));
        }
    }
}

proptest! {
    #[test]
    fn split_never_leaks(ids in prop::collection::vec(0u64..15, 2..80), seed in any::<u64>(), f in 0.1f64..0.9) {
        let distinct: std::collections::BTreeSet<_> = ids.iter().collect();
        prop_assume!(distinct.len() >= 2);
        let items: Vec<(usize, u64)> = ids.iter().copied().enumerate().collect();
        let s = split(items.clone(), |it| it.1, f, seed).unwrap();
        prop_assert_eq!(s.train.len() + s.test.len(), items.len());
        for it in &s.train {
            prop_assert!(!s.test.iter().any(|o| o.1 == it.1 || o.0 == it.0));
        }
        prop_assert!(s.train_vehicles.iter().all(|v| !s.test_vehicles.contains(v)));
        let again = split(items, |it| it.1, f, seed).unwrap();
        prop_assert_eq!(again.train, s.train);
    }
}
