//! From raw frames to model inputs: per-frame 10-feature states in the ego
//! frame, min-max scaling, ZCA whitening, and history/future windows at the
//! working rate.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{label_maneuver, Maneuver, Track};
use crate::error::{Error, Result};
use crate::social::GridSpec;

pub const NUM_FEATURES: usize = 10;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] =
    ["x", "y", "dx", "v", "a", "psi", "W", "L", "C", "laneId"];

/// Working-rate frames between the two positions used for the heading.
pub const HEADING_LAG: usize = 3;
pub const DEFAULT_HISTORY: usize = 16;
pub const DEFAULT_FUTURE: usize = 25;
pub const DEFAULT_ZCA_EPSILON: f64 = 1e-5;
const PARAMS_VERSION: u32 = 1;

/// One frame's multi-modal state, features in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Signed lateral offset from the current lane center, negative to the left.
    pub dx: f64,
    pub v: f64,
    pub a: f64,
    pub psi: f64,
    pub width: f64,
    pub length: f64,
    pub class: f64,
    pub lane_id: f64,
}

impl VehicleState {
    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.x, self.y, self.dx, self.v, self.a, self.psi, self.width, self.length, self.class,
            self.lane_id,
        ]
    }

    pub fn from_array(f: [f64; NUM_FEATURES]) -> Self {
        VehicleState {
            x: f[0],
            y: f[1],
            dx: f[2],
            v: f[3],
            a: f[4],
            psi: f[5],
            width: f[6],
            length: f[7],
            class: f[8],
            lane_id: f[9],
        }
    }

    pub fn translated(&self, ox: f64, oy: f64) -> Self {
        VehicleState {
            x: self.x - ox,
            y: self.y - oy,
            ..*self
        }
    }
}

/// Lateral lane centers per lane id (feet, site coordinates).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LaneTable {
    pub centers: BTreeMap<i32, f64>,
}

impl LaneTable {
    /// Equal-width lanes numbered from 1 at the left edge.
    pub fn uniform(lanes: i32, width: f64) -> Self {
        LaneTable {
            centers: (1..=lanes).map(|l| (l, crate::data::lane_center(l, width))).collect(),
        }
    }

    /// Estimates each lane's center as the mean lateral position of all frames
    /// recorded in it.
    pub fn estimate(tracks: &[Track]) -> Self {
        let mut acc: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
        for f in tracks.iter().flat_map(|t| &t.frames) {
            let e = acc.entry(f.lane_id).or_default();
            e.0 += f.x;
            e.1 += 1;
        }
        LaneTable {
            centers: acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect(),
        }
    }

    pub fn offset(&self, lane: i32, x: f64) -> Result<f64> {
        self.centers
            .get(&lane)
            .map(|c| x - c)
            .ok_or_else(|| Error::Lookup(format!("lane {lane} missing from the lane table")))
    }
}

/// Keeps every `rate`-th frame starting from the first.
pub fn downsample(track: &Track, rate: usize) -> Result<Track> {
    if rate == 0 {
        return Err(Error::Usage("downsampling rate must be at least 1".into()));
    }
    Ok(Track {
        frames: track.frames.iter().step_by(rate).copied().collect(),
        ..track.clone()
    })
}

/// Keeps the frames whose index is a multiple of `rate`, so that tracks of
/// different vehicles stay on a common clock after downsampling.
pub fn downsample_aligned(track: &Track, rate: usize) -> Result<Track> {
    if rate == 0 {
        return Err(Error::Usage("downsampling rate must be at least 1".into()));
    }
    Ok(Track {
        frames: track
            .frames
            .iter()
            .filter(|f| f.frame_index.rem_euclid(rate as i64) == 0)
            .copied()
            .collect(),
        ..track.clone()
    })
}

/// Translates every track so that the ego's position at frame `t` becomes the
/// origin.
pub fn to_ego_frame(tracks: &[Track], ego_id: u64, t: i64) -> Result<Vec<Track>> {
    let ego = tracks
        .iter()
        .filter(|tr| tr.vehicle_id == ego_id)
        .find_map(|tr| tr.position_of(t).map(|p| tr.frames[p]))
        .ok_or_else(|| Error::Lookup(format!("vehicle {ego_id} not present at frame {t}")))?;
    Ok(tracks
        .iter()
        .map(|tr| Track {
            frames: tr
                .frames
                .iter()
                .map(|f| crate::data::Frame {
                    x: f.x - ego.x,
                    y: f.y - ego.y,
                    ..*f
                })
                .collect(),
            ..tr.clone()
        })
        .collect())
}

/// Heading at frame position `t` from the displacement since `t − 3` (or since
/// the earliest frame when the track is younger; at `t = 0` the first two
/// frames are used). Zero for displacements under 1e-6 ft.
pub fn heading_angle(track: &Track, t: usize) -> Result<f64> {
    if track.len() < 2 {
        return Err(Error::InsufficientHistory(format!(
            "vehicle {} has {} frame(s); heading needs 2",
            track.vehicle_id,
            track.len()
        )));
    }
    if t >= track.len() {
        return Err(Error::Lookup(format!("frame position {t} beyond track of {}", track.len())));
    }
    let (from, to) = if t == 0 { (0, 1) } else { (t.saturating_sub(HEADING_LAG), t) };
    let (a, b) = (&track.frames[from], &track.frames[to]);
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    if dx.hypot(dy) < 1e-6 {
        return Ok(0.0);
    }
    let psi = dx.atan2(dy);
    Ok(if psi <= -std::f64::consts::PI { std::f64::consts::PI } else { psi })
}

/// Site-coordinate states for every frame of a working-rate track.
pub fn track_states(track: &Track, lanes: &LaneTable) -> Result<Vec<VehicleState>> {
    track
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(VehicleState {
                x: f.x,
                y: f.y,
                dx: lanes.offset(f.lane_id, f.x)?,
                v: f.v,
                a: f.a,
                psi: if track.len() >= 2 { heading_angle(track, i)? } else { 0.0 },
                width: f.width,
                length: f.length,
                class: f.class as f64,
                lane_id: f.lane_id as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxParams {
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Fit(format!(
                "min-max needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let d = samples[0].len();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for s in samples {
            if s.len() != d {
                return Err(Error::Dimension(format!("min-max sample of {} features, expected {d}", s.len())));
            }
            for k in 0..d {
                if !s[k].is_finite() {
                    return Err(Error::Numeric(format!("min-max input feature {k}")));
                }
                min[k] = min[k].min(s[k]);
                max[k] = max[k].max(s[k]);
            }
        }
        Ok(MinMaxParams { min, max })
    }

    /// Scales into [0, 1], clipping values outside the fitted range; constant
    /// features map to 0.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                if hi > lo {
                    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn invert(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| lo + v * (hi - lo))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningParams {
    pub mean: Vec<f64>,
    /// `U(Λ+εI)^(−1/2)Uᵀ`, row-major.
    pub matrix: Vec<f64>,
    pub epsilon: f64,
}

impl WhiteningParams {
    pub fn fit(samples: &[Vec<f64>], epsilon: f64) -> Result<Self> {
        let n = samples.len();
        let d = samples.first().map_or(0, Vec::len);
        if !(epsilon > 0.0) {
            return Err(Error::Fit(format!("whitening epsilon must be positive, got {epsilon}")));
        }
        if d == 0 || n <= d {
            return Err(Error::Fit(format!(
                "whitening {d} features needs more than {d} samples, got {n}"
            )));
        }
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::Dimension("whitening samples differ in length".into()));
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("whitening input".into()));
        }
        let mut mean = vec![0.0; d];
        for s in samples {
            for k in 0..d {
                mean[k] += s[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for s in samples {
            for i in 0..d {
                let ci = s[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += ci * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / n as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let scale = DMatrix::from_diagonal(
            &eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + epsilon).sqrt()),
        );
        let w = &eig.eigenvectors * scale * eig.eigenvectors.transpose();
        let mut matrix = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                // symmetrize away roundoff
                matrix[i * d + j] = 0.5 * (w[(i, j)] + w[(j, i)]);
            }
        }
        Ok(WhiteningParams { mean, matrix, epsilon })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let c: Vec<f64> = s.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        (0..d)
            .map(|i| (0..d).map(|j| self.matrix[i * d + j] * c[j]).sum())
            .collect()
    }
}

/// Fitted input pipeline: feature selection, min-max scaling and optional
/// whitening. Serialized as a versioned JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub version: u32,
    /// Names of the selected features, in canonical order.
    pub features: Vec<String>,
    pub mask: Vec<usize>,
    pub minmax: MinMaxParams,
    pub whitening: Option<WhiteningParams>,
}

impl PreprocessParams {
    /// Fits on training states only. `zca_epsilon = None` disables whitening.
    pub fn fit(states: &[VehicleState], mask: &[usize], zca_epsilon: Option<f64>) -> Result<Self> {
        if mask.is_empty() || mask.iter().any(|&k| k >= NUM_FEATURES) {
            return Err(Error::Config(format!("invalid feature mask {mask:?}")));
        }
        let selected: Vec<Vec<f64>> = states.iter().map(|s| select(s, mask)).collect();
        let minmax = MinMaxParams::fit(&selected)?;
        let whitening = match zca_epsilon {
            Some(eps) => {
                let scaled: Vec<Vec<f64>> = selected.iter().map(|s| minmax.apply(s)).collect();
                Some(WhiteningParams::fit(&scaled, eps)?)
            }
            None => None,
        };
        Ok(PreprocessParams {
            version: PARAMS_VERSION,
            features: mask.iter().map(|&k| FEATURE_NAMES[k].to_string()).collect(),
            mask: mask.to_vec(),
            minmax,
            whitening,
        })
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn apply(&self, s: &VehicleState) -> Vec<f64> {
        let scaled = self.minmax.apply(&select(s, &self.mask));
        match &self.whitening {
            Some(w) => w.apply(&scaled),
            None => scaled,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: PreprocessParams = serde_json::from_str(&text)?;
        if p.version != PARAMS_VERSION {
            return Err(Error::Format(format!("unsupported preprocessing version {}", p.version)));
        }
        Ok(p)
    }
}

fn select(s: &VehicleState, mask: &[usize]) -> Vec<f64> {
    let a = s.to_array();
    mask.iter().map(|&k| a[k]).collect()
}

/// History of one vehicle in a window, oldest frame first, in the ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleHistory {
    pub vehicle_id: u64,
    pub states: Vec<VehicleState>,
    /// Leading frames that repeat the earliest observed frame.
    pub padded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub ego_id: u64,
    /// Frame index of the reference instant.
    pub t: i64,
    /// Ego first, then neighbors inside the grid footprint in track order.
    pub vehicles: Vec<VehicleHistory>,
    /// Ego positions `(x, y)` after `t`, in the ego frame (feet).
    pub future: Vec<[f64; 2]>,
    pub label: Maneuver,
}

impl Window {
    pub fn ego(&self) -> &VehicleHistory {
        &self.vehicles[0]
    }

    /// States of all vehicles at the reference instant.
    pub fn current_states(&self) -> Vec<VehicleState> {
        self.vehicles.iter().map(|v| *v.states.last().expect("non-empty history")).collect()
    }
}

/// Working-rate tracks with precomputed site-coordinate states and a frame
/// index for neighbor lookup.
#[derive(Debug, Clone)]
pub struct Scene {
    pub tracks: Vec<Track>,
    pub states: Vec<Vec<VehicleState>>,
    /// Frame-index distance between consecutive working frames.
    pub step: i64,
    by_frame: HashMap<i64, Vec<(usize, usize)>>,
}

impl Scene {
    /// `tracks` must already be at the working rate with frame indices spaced
    /// `step` apart. Tracks shorter than 2 frames are dropped.
    pub fn new(tracks: Vec<Track>, lanes: &LaneTable, step: i64) -> Result<Self> {
        let tracks: Vec<Track> = tracks.into_iter().filter(|t| t.len() >= 2).collect();
        let states = tracks
            .iter()
            .map(|t| track_states(t, lanes))
            .collect::<Result<Vec<_>>>()?;
        let mut by_frame: HashMap<i64, Vec<(usize, usize)>> = HashMap::new();
        for (ti, t) in tracks.iter().enumerate() {
            for (p, f) in t.frames.iter().enumerate() {
                by_frame.entry(f.frame_index).or_default().push((ti, p));
            }
        }
        Ok(Scene {
            tracks,
            states,
            step,
            by_frame,
        })
    }

    /// Whether positions `from..=to` of track `ti` are evenly spaced at the
    /// working step.
    fn contiguous(&self, ti: usize, from: usize, to: usize) -> bool {
        let f = &self.tracks[ti].frames;
        f[to].frame_index - f[from].frame_index == (to - from) as i64 * self.step
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowStats {
    pub built: usize,
    pub short_history: usize,
    pub short_future: usize,
}

#[derive(Debug)]
pub enum WindowOutcome {
    Built(Window),
    ShortHistory,
    ShortFuture,
}

/// Window of track `ti` around its frame position `t`.
pub fn make_window(
    scene: &Scene,
    ti: usize,
    t: usize,
    history: usize,
    future: usize,
    grid: &GridSpec,
) -> WindowOutcome {
    let track = &scene.tracks[ti];
    if history == 0 || t + 1 < history || !scene.contiguous(ti, t + 1 - history, t) {
        return WindowOutcome::ShortHistory;
    }
    if t + future >= track.len() || !scene.contiguous(ti, t, t + future) {
        return WindowOutcome::ShortFuture;
    }
    let Some(label) = label_maneuver(track, t, future) else {
        return WindowOutcome::ShortFuture;
    };
    let frame_t = track.frames[t].frame_index;
    let origin = scene.states[ti][t];
    let (ox, oy) = (origin.x, origin.y);
    let ego_states: Vec<VehicleState> = scene.states[ti][t + 1 - history..=t]
        .iter()
        .map(|s| s.translated(ox, oy))
        .collect();
    let mut vehicles = vec![VehicleHistory {
        vehicle_id: track.vehicle_id,
        states: ego_states,
        padded: 0,
    }];
    let ego_now = origin.translated(ox, oy);
    let mut present = scene.by_frame.get(&frame_t).cloned().unwrap_or_default();
    present.sort_unstable();
    for (nj, p) in present {
        if nj == ti {
            continue;
        }
        let now = scene.states[nj][p].translated(ox, oy);
        if grid.assign_cell(&now, &ego_now).is_none() {
            continue;
        }
        // earliest contiguous position covering at most `history` frames
        let mut start = p;
        while start > 0 && p - start + 1 < history && scene.contiguous(nj, start - 1, p) {
            start -= 1;
        }
        let observed: Vec<VehicleState> = scene.states[nj][start..=p]
            .iter()
            .map(|s| s.translated(ox, oy))
            .collect();
        let padded = history - observed.len();
        let mut states = vec![observed[0]; padded];
        states.extend(observed);
        vehicles.push(VehicleHistory {
            vehicle_id: scene.tracks[nj].vehicle_id,
            states,
            padded,
        });
    }
    let fut = track.frames[t + 1..=t + future]
        .iter()
        .map(|f| [f.x - ox, f.y - oy])
        .collect();
    WindowOutcome::Built(Window {
        ego_id: track.vehicle_id,
        t: frame_t,
        vehicles,
        future: fut,
        label,
    })
}

/// All windows of all tracks, sampled every `stride` working frames.
pub fn build_windows(
    scene: &Scene,
    stride: usize,
    history: usize,
    future: usize,
    grid: &GridSpec,
) -> (Vec<Window>, WindowStats) {
    let mut stats = WindowStats::default();
    let mut out = Vec::new();
    for ti in 0..scene.tracks.len() {
        for t in (0..scene.tracks[ti].len()).step_by(stride.max(1)) {
            match make_window(scene, ti, t, history, future, grid) {
                WindowOutcome::Built(w) => {
                    stats.built += 1;
                    out.push(w);
                }
                WindowOutcome::ShortHistory => stats.short_history += 1,
                WindowOutcome::ShortFuture => stats.short_future += 1,
            }
        }
    }
    (out, stats)
}
