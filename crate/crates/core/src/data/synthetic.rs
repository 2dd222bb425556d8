use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Frame, Track};
use crate::error::{Error, Result};

/// Parameters of the synthetic highway. Every vehicle is on the road for the
/// whole duration, drives at a constant longitudinal speed, and with
/// probability `lane_change_prob` performs one lane change to a random
/// adjacent lane at a random time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub vehicles: usize,
    pub lanes: i32,
    pub lane_width: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub lane_change_prob: f64,
    pub duration_s: f64,
    /// Standard deviation of the additive position noise (feet).
    pub noise_sigma: f64,
    pub rate_hz: f64,
    pub change_duration_s: f64,
    /// Initial longitudinal positions are drawn from `[0, road_length]`.
    pub road_length: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vehicles: 40,
            lanes: 4,
            lane_width: 12.0,
            speed_min: 45.0,
            speed_max: 75.0,
            lane_change_prob: 0.5,
            duration_s: 20.0,
            noise_sigma: 0.0,
            rate_hz: 10.0,
            change_duration_s: 3.0,
            road_length: 800.0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.lanes <= 0 {
            return bad("lane count must be positive");
        }
        if self.vehicles == 0 {
            return bad("vehicle count must be positive");
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min) {
            return bad("speed range must satisfy 0 ≤ min ≤ max");
        }
        if !(0.0..=1.0).contains(&self.lane_change_prob) {
            return bad("lane-change probability outside [0, 1]");
        }
        if !(self.rate_hz > 0.0 && self.duration_s > 0.0 && self.change_duration_s > 0.0) {
            return bad("rate and durations must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.lane_width > 0.0 && self.road_length >= 0.0) {
            return bad("noise, lane width and road length must be non-negative");
        }
        Ok(())
    }
}

/// Lateral center of 1-based lane `lane`.
pub fn lane_center(lane: i32, lane_width: f64) -> f64 {
    (lane as f64 - 0.5) * lane_width
}

const PROFILE_STEEPNESS: f64 = 10.0;

/// Fraction of the lateral move completed at normalized time `u`: a logistic
/// curve rescaled to run exactly from 0 at `u = 0` to 1 at `u = 1`.
pub fn lateral_profile(u: f64) -> f64 {
    let s = |z: f64| 1.0 / (1.0 + (-z).exp());
    let k = PROFILE_STEEPNESS;
    let u = u.clamp(0.0, 1.0);
    (s(k * (u - 0.5)) - s(-k / 2.0)) / (s(k / 2.0) - s(-k / 2.0))
}

pub fn gen_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Vec<Track>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("synthetic noise: {e}")))?;
    let n_frames = (config.duration_s * config.rate_hz).round() as usize + 1;
    let dt = 1.0 / config.rate_hz;
    let mut tracks = Vec::with_capacity(config.vehicles);
    for vid in 1..=config.vehicles as u64 {
        let lane0 = rng.gen_range(1..=config.lanes);
        let y0 = rng.gen_range(0.0..=config.road_length);
        let speed = rng.gen_range(config.speed_min..=config.speed_max);
        let truck = rng.gen_bool(0.1);
        let (width, length, class) = if truck {
            (rng.gen_range(8.0..8.5), rng.gen_range(30.0..50.0), 3)
        } else {
            (rng.gen_range(5.5..7.0), rng.gen_range(13.0..18.0), 2)
        };
        let mut change: Option<(f64, i32)> = None;
        if config.lanes > 1 && rng.gen_bool(config.lane_change_prob) {
            let dir = if lane0 == 1 {
                1
            } else if lane0 == config.lanes {
                -1
            } else if rng.gen_bool(0.5) {
                1
            } else {
                -1
            };
            let latest = (config.duration_s - config.change_duration_s).max(0.0);
            change = Some((rng.gen_range(0.0..=latest), dir));
        }
        let clean: Vec<(f64, f64, i32)> = (0..n_frames)
            .map(|k| {
                let t = k as f64 * dt;
                let (mut x, mut lane) = (lane_center(lane0, config.lane_width), lane0);
                if let Some((t0, dir)) = change {
                    let u = (t - t0) / config.change_duration_s;
                    x += dir as f64 * config.lane_width * lateral_profile(u);
                    if u >= 0.5 {
                        lane += dir;
                    }
                }
                (x, y0 + speed * t, lane)
            })
            .collect();
        let speeds: Vec<f64> = (0..n_frames)
            .map(|k| {
                let j = k.max(1);
                let (dx, dy) = (clean[j].0 - clean[j - 1].0, clean[j].1 - clean[j - 1].1);
                dx.hypot(dy) / dt
            })
            .collect();
        let frames = (0..n_frames)
            .map(|k| {
                let j = k.max(1);
                let (mut x, mut y, lane_id) = clean[k];
                if config.noise_sigma > 0.0 {
                    x += noise.sample(&mut rng);
                    y += noise.sample(&mut rng);
                }
                Frame {
                    frame_index: k as i64,
                    x,
                    y,
                    v: speeds[k],
                    a: if n_frames > 1 { (speeds[j] - speeds[j - 1]) / dt } else { 0.0 },
                    lane_id,
                    width,
                    length,
                    class,
                }
            })
            .collect();
        tracks.push(Track {
            vehicle_id: vid,
            site: "synthetic".into(),
            frames,
        });
    }
    Ok(tracks)
}
