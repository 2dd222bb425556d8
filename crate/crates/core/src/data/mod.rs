//! Trajectory ingestion: NGSIM-format CSV, the canonical NDJSON track store,
//! maneuver labels, the synthetic highway generator and vehicle-level splits.

mod ngsim;
mod store;
mod synthetic;

pub use ngsim::{parse_ngsim, write_ngsim, ParseReport, NGSIM_COLUMNS};
pub use store::{read_store, write_store, FrameRecord};
pub use synthetic::{gen_synthetic, lane_center, lateral_profile, SyntheticConfig};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One recorded frame of one vehicle, in site coordinates (feet).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_index: i64,
    /// Lateral position; grows to the right, matching lane numbering.
    pub x: f64,
    /// Longitudinal position along the direction of travel.
    pub y: f64,
    pub v: f64,
    pub a: f64,
    pub lane_id: i32,
    pub width: f64,
    pub length: f64,
    pub class: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub vehicle_id: u64,
    pub site: String,
    pub frames: Vec<Frame>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Position of `frame_index` inside `frames`, if recorded.
    pub fn position_of(&self, frame_index: i64) -> Option<usize> {
        self.frames
            .binary_search_by_key(&frame_index, |f| f.frame_index)
            .ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Maneuver {
    Keep,
    Left,
    Right,
}

impl Maneuver {
    /// Fixed order, which is also the argmax tie-break priority.
    pub const ALL: [Maneuver; 3] = [Maneuver::Keep, Maneuver::Left, Maneuver::Right];

    pub fn index(self) -> usize {
        match self {
            Maneuver::Keep => 0,
            Maneuver::Left => 1,
            Maneuver::Right => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Maneuver> {
        Self::ALL.get(i).copied()
    }
}

/// Label from the lane at `t` and at `t + horizon` (frame positions within the
/// track). Lanes are numbered left to right, so a smaller id means a move to
/// the left; multi-lane changes collapse to their direction. `None` when the
/// track does not reach `t + horizon`.
pub fn label_maneuver(track: &Track, t: usize, horizon: usize) -> Option<Maneuver> {
    let now = track.frames.get(t)?.lane_id;
    let later = track.frames.get(t + horizon)?.lane_id;
    Some(match later.cmp(&now) {
        std::cmp::Ordering::Equal => Maneuver::Keep,
        std::cmp::Ordering::Less => Maneuver::Left,
        std::cmp::Ordering::Greater => Maneuver::Right,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
    pub fraction: f64,
    pub train_vehicles: Vec<u64>,
    pub test_vehicles: Vec<u64>,
}

/// Splits items by owning vehicle so that no vehicle contributes to both
/// sides. The train side receives `round(fraction·n)` vehicles, kept within
/// `[1, n−1]`. Item order within each side follows the input order.
pub fn split<T>(
    items: Vec<T>,
    vehicle_of: impl Fn(&T) -> u64,
    fraction: f64,
    seed: u64,
) -> Result<DatasetSplit<T>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} outside (0, 1)")));
    }
    let ids: BTreeSet<u64> = items.iter().map(&vehicle_of).collect();
    if ids.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 vehicles, found {}",
            ids.len()
        )));
    }
    let mut order: Vec<u64> = ids.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut train_vehicles = order[..n_train].to_vec();
    let mut test_vehicles = order[n_train..].to_vec();
    train_vehicles.sort_unstable();
    test_vehicles.sort_unstable();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for item in items {
        if train_vehicles.binary_search(&vehicle_of(&item)).is_ok() {
            train.push(item);
        } else {
            test.push(item);
        }
    }
    Ok(DatasetSplit {
        train,
        test,
        seed,
        fraction,
        train_vehicles,
        test_vehicles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lane_track(lanes: &[i32]) -> Track {
        Track {
            vehicle_id: 1,
            site: "t".into(),
            frames: lanes
                .iter()
                .enumerate()
                .map(|(i, &l)| Frame {
                    frame_index: i as i64,
                    x: 0.0,
                    y: i as f64,
                    v: 0.0,
                    a: 0.0,
                    lane_id: l,
                    width: 6.0,
                    length: 15.0,
                    class: 2,
                })
                .collect(),
        }
    }

    #[test]
    fn labels_follow_lane_numbering() {
        assert_eq!(label_maneuver(&lane_track(&[3, 3, 3]), 0, 2), Some(Maneuver::Keep));
        assert_eq!(label_maneuver(&lane_track(&[3, 2, 2]), 0, 2), Some(Maneuver::Left));
        assert_eq!(label_maneuver(&lane_track(&[2, 3, 4]), 0, 2), Some(Maneuver::Right));
        assert_eq!(label_maneuver(&lane_track(&[2, 3]), 0, 2), None);
    }

    #[test]
    fn split_counts() {
        let items: Vec<u64> = (0..10).collect();
        let s = split(items, |&v| v, 0.8, 7).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        let s = split(vec![1u64, 2], |&v| v, 0.5, 7).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 1));
        assert!(matches!(split(vec![1u64, 1], |&v| v, 0.5, 7), Err(Error::Split(_))));
        assert!(matches!(split(vec![1u64, 2], |&v| v, 1.0, 7), Err(Error::Split(_))));
    }
}
