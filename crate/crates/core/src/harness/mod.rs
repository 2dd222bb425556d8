//! Experiment orchestration: dataset assembly, pipeline fitting, end-to-end
//! training, RMSE evaluation, the constant-velocity baseline and ablations.

mod config;
mod metrics;

pub use config::{
    DatasetSource, ExperimentConfig, PreprocessConfig, SeparableFilter, TrainingConfig, Variant,
};
pub use metrics::{
    comparison_csv, horizon_errors, rmse_ft, rmse_svg, MetricsReport, WindowErrors, FEET_TO_METERS,
    HORIZONS_S,
};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Maneuver, Track};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, ParamStore, Tensor};
use crate::predictor::{mixture_nll, point_forecast, LossMode, Model, PreparedWindow};
use crate::preprocess::{self, LaneTable, PreprocessParams, Scene, Window, WindowStats};
use crate::ssae::{PretrainLog, SsaeModel};

/// Source-rate tracks and the lane table that goes with them.
pub fn load_tracks(source: &DatasetSource) -> Result<(Vec<Track>, LaneTable)> {
    let table = |given: &Option<std::collections::BTreeMap<i32, f64>>, tracks: &[Track]| match given {
        Some(c) => LaneTable { centers: c.clone() },
        None => LaneTable::estimate(tracks),
    };
    match source {
        DatasetSource::Synthetic { params, seed } => Ok((
            data::gen_synthetic(params, *seed)?,
            LaneTable::uniform(params.lanes, params.lane_width),
        )),
        DatasetSource::Ngsim {
            path,
            site,
            lane_centers,
        } => {
            let report = data::parse_ngsim(path, site)?;
            if report.malformed > 0 {
                info!("{}: skipped {} malformed rows", path.display(), report.malformed);
            }
            let lanes = table(lane_centers, &report.tracks);
            Ok((report.tracks, lanes))
        }
        DatasetSource::Store { path, lane_centers } => {
            let tracks = data::read_store(path)?;
            let lanes = table(lane_centers, &tracks);
            Ok((tracks, lanes))
        }
    }
}

/// Windows drawn from source-rate tracks per the preprocessing settings.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub windows: Vec<Window>,
    pub stats: WindowStats,
    /// Windows dropped by the separability filter.
    pub not_separable: usize,
    /// Windows dropped to reach the lane-change fraction or window cap.
    pub subsampled: usize,
}

/// Lateral ego displacement over the history (feet, right positive).
pub fn history_lateral_motion(w: &Window) -> f64 {
    let s = &w.ego().states;
    s[s.len() - 1].x - s[0].x
}

fn is_change(m: Maneuver) -> bool {
    m != Maneuver::Keep
}

pub fn windows_from_tracks(
    tracks: &[Track],
    lanes: &LaneTable,
    p: &PreprocessConfig,
    grid: &crate::social::GridSpec,
    seed: u64,
) -> Result<Dataset> {
    let working = tracks
        .iter()
        .map(|t| preprocess::downsample_aligned(t, p.rate))
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene::new(working, lanes, p.rate as i64)?;
    let (mut windows, stats) = preprocess::build_windows(&scene, p.window_stride, p.history, p.future, grid);
    let before = windows.len();
    if let Some(f) = p.separable {
        windows.retain(|w| {
            let d = history_lateral_motion(w);
            match w.label {
                Maneuver::Keep => d.abs() <= f.max_keep_lateral_ft,
                Maneuver::Left => d <= -f.min_change_lateral_ft,
                Maneuver::Right => d >= f.min_change_lateral_ft,
            }
        });
    }
    let not_separable = before - windows.len();
    let before = windows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    if let Some(f) = p.lane_change_fraction {
        let changes = windows.iter().filter(|w| is_change(w.label)).count();
        let keeps = windows.len() - changes;
        let (drop_change, keep_n) = if changes as f64 > f * windows.len() as f64 {
            (true, ((f / (1.0 - f)) * keeps as f64).round() as usize)
        } else {
            (false, (((1.0 - f) / f) * changes as f64).round() as usize)
        };
        let mut pool: Vec<usize> = (0..windows.len())
            .filter(|&i| is_change(windows[i].label) == drop_change)
            .collect();
        pool.shuffle(&mut rng);
        let mut dropped = vec![false; windows.len()];
        for &i in pool.iter().skip(keep_n) {
            dropped[i] = true;
        }
        let mut i = 0;
        windows.retain(|_| {
            i += 1;
            !dropped[i - 1]
        });
    }
    if let Some(cap) = p.max_windows {
        if windows.len() > cap {
            let mut idx: Vec<usize> = (0..windows.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(cap);
            idx.sort_unstable();
            windows = idx.into_iter().map(|i| windows[i].clone()).collect();
        }
    }
    Ok(Dataset {
        subsampled: before - windows.len(),
        windows,
        stats,
        not_separable,
    })
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (tracks, lanes) = load_tracks(&cfg.dataset)?;
    windows_from_tracks(&tracks, &lanes, &cfg.preprocess, &cfg.model.grid, cfg.training.split_seed)
}

/// Train/validation/test windows, split by ego vehicle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataBundle {
    pub train: Vec<Window>,
    pub validation: Vec<Window>,
    pub test: Vec<Window>,
    pub data_hash: String,
}

pub fn split_dataset(windows: Vec<Window>, cfg: &ExperimentConfig) -> Result<DataBundle> {
    let t = &cfg.training;
    let s = data::split(windows, |w| w.ego_id, t.split_fraction, t.split_seed)?;
    let (train, validation) = if t.validation_fraction > 0.0 {
        match data::split(s.train.clone(), |w| w.ego_id, 1.0 - t.validation_fraction, t.split_seed.wrapping_add(1)) {
            Ok(v) => (v.train, v.test),
            Err(Error::Split(_)) => (s.train, Vec::new()),
            Err(e) => return Err(e),
        }
    } else {
        (s.train, Vec::new())
    };
    Ok(DataBundle {
        train,
        validation,
        test: s.test,
        data_hash: cfg.data_hash(),
    })
}

/// Fitted preprocessing plus, for the descriptor variant, the pretrained
/// autoencoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pipeline {
    pub preprocess: PreprocessParams,
    pub ssae: Option<SsaeModel>,
    pub ssae_log: Option<PretrainLog>,
}

/// Fits scaling (and whitening plus autoencoder for the descriptor variant)
/// on the training windows only.
pub fn fit_pipeline(cfg: &ExperimentConfig, train: &[Window]) -> Result<Pipeline> {
    let states: Vec<_> = train
        .iter()
        .flat_map(|w| w.vehicles.iter().flat_map(|v| v.states.iter().copied()))
        .collect();
    let eps = cfg.variant.uses_descriptors().then_some(cfg.preprocess.zca_epsilon);
    let pre = PreprocessParams::fit(&states, &cfg.variant.feature_mask(), eps)?;
    if !cfg.variant.uses_descriptors() {
        return Ok(Pipeline {
            preprocess: pre,
            ssae: None,
            ssae_log: None,
        });
    }
    let d = pre.dim();
    let rows: Vec<f64> = states.iter().flat_map(|s| pre.apply(s)).collect();
    let data = Tensor::new(&[states.len(), d], rows)?;
    let (model, log) = SsaeModel::pretrain(&data, cfg.ssae.clone(), cfg.training.seed)?;
    info!(
        "autoencoder pretrained: joint loss {:.5} after {} epochs",
        log.joint.last().copied().unwrap_or(f64::NAN),
        log.joint.len()
    );
    Ok(Pipeline {
        preprocess: pre,
        ssae: Some(model),
        ssae_log: Some(log),
    })
}

pub fn prepare(windows: &[Window], pipeline: &Pipeline, cfg: &ExperimentConfig) -> Result<Vec<PreparedWindow>> {
    windows
        .iter()
        .map(|w| PreparedWindow::new(w, &pipeline.preprocess, &cfg.model.grid))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

/// Mean per-window loss over `windows`, evaluated in batches.
pub fn mean_loss(model: &Model, windows: &[PreparedWindow], mode: LossMode, batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in windows.chunks(batch.max(1)) {
        let refs: Vec<&PreparedWindow> = chunk.iter().collect();
        total += model.loss(&refs, mode)? * chunk.len() as f64;
    }
    Ok(total / windows.len().max(1) as f64)
}

/// End-to-end Adam training. Batches are drawn in a seeded order; with a
/// patience set, the parameters with the best validation loss are kept.
/// Scales all gradients by a common factor so their joint L2 norm is at most
/// `limit`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], limit: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > limit && norm.is_finite() {
        let s = limit / norm;
        for t in grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

pub fn train_model(
    model: &mut Model,
    train: &[PreparedWindow],
    validation: &[PreparedWindow],
    cfg: &TrainingConfig,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::Training("no training windows".into()));
    }
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1a);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedWindow> = chunk.iter().map(|&i| &train[i]).collect();
            let fail = |what: String| Error::Training(format!("epoch {epoch}, batch {bi}: {what}"));
            let (loss, mut grads) = model
                .loss_gradients(&batch, cfg.loss_mode)
                .map_err(|e| fail(e.to_string()))?;
            if !loss.is_finite() {
                return Err(fail(format!("loss {loss}")));
            }
            if let Some(limit) = cfg.grad_clip {
                clip_global_norm(&mut grads, limit);
            }
            adam.step(&mut model.params, &grads).map_err(|e| fail(e.to_string()))?;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let validation_loss = if validation.is_empty() {
            None
        } else {
            Some(mean_loss(model, validation, cfg.loss_mode, cfg.batch_size)?)
        };
        debug!("epoch {epoch}: train {train_loss:.4} validation {validation_loss:?}");
        log.push(EpochLog {
            epoch,
            train_loss,
            validation_loss,
        });
        if let (Some(patience), Some(v)) = (cfg.patience, validation_loss) {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(log)
}

/// Scores a model on prepared windows. Returns the report and the
/// per-window horizon errors it was computed from.
pub fn evaluate(
    model: &Model,
    windows: &[PreparedWindow],
    cfg: &ExperimentConfig,
) -> Result<(MetricsReport, Vec<WindowErrors>)> {
    if windows.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let horizons = cfg.preprocess.horizon_indices();
    let mut errors = Vec::with_capacity(windows.len());
    let (mut nll, mut correct) = (0.0, 0usize);
    for chunk in windows.chunks(cfg.training.batch_size.max(1)) {
        let refs: Vec<&PreparedWindow> = chunk.iter().collect();
        for (w, pred) in chunk.iter().zip(model.predict_batch(&refs)?) {
            let forecast = point_forecast(&pred);
            errors.push(WindowErrors {
                ego_id: w.ego_id,
                t: w.t,
                errors_ft: horizon_errors(&forecast, &w.future, &horizons)?,
            });
            nll += mixture_nll(&pred, &w.future)?;
            if crate::predictor::argmax_maneuver(&pred.maneuver_probs) == w.label {
                correct += 1;
            }
        }
    }
    let n = windows.len() as f64;
    let report = MetricsReport::from_errors(
        cfg.variant.tag(),
        &errors,
        Some(nll / n),
        Some(correct as f64 / n),
        &cfg.hash(),
        &cfg.data_hash(),
    )?;
    Ok((report, errors))
}

/// Constant-velocity forecast: the ego's last observed displacement per
/// frame, repeated over the horizon.
pub fn cv_baseline(window: &Window) -> Result<Vec<[f64; 2]>> {
    let s = &window.ego().states;
    if s.len() < 2 {
        return Err(Error::Baseline("constant velocity needs two history frames".into()));
    }
    let (last, prev) = (&s[s.len() - 1], &s[s.len() - 2]);
    let (vx, vy) = (last.x - prev.x, last.y - prev.y);
    Ok((1..=window.future.len())
        .map(|k| [last.x + vx * k as f64, last.y + vy * k as f64])
        .collect())
}

pub fn evaluate_baseline(windows: &[Window], cfg: &ExperimentConfig) -> Result<(MetricsReport, Vec<WindowErrors>)> {
    if windows.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let horizons = cfg.preprocess.horizon_indices();
    let errors = windows
        .iter()
        .map(|w| {
            Ok(WindowErrors {
                ego_id: w.ego_id,
                t: w.t,
                errors_ft: horizon_errors(&cv_baseline(w)?, &w.future, &horizons)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::from_errors("CV", &errors, None, None, &cfg.hash(), &cfg.data_hash())?;
    Ok((report, errors))
}

/// Everything one training run produces.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: Model,
    pub pipeline: Pipeline,
    pub log: Vec<EpochLog>,
    pub report: MetricsReport,
    pub errors: Vec<WindowErrors>,
}

/// Fits the pipeline on `bundle.train`, trains the configured variant and
/// evaluates it on `bundle.test`.
pub fn run_on_bundle(cfg: &ExperimentConfig, bundle: &DataBundle) -> Result<Experiment> {
    cfg.validate()?;
    let pipeline = fit_pipeline(cfg, &bundle.train)?;
    let train = prepare(&bundle.train, &pipeline, cfg)?;
    let validation = prepare(&bundle.validation, &pipeline, cfg)?;
    let test = prepare(&bundle.test, &pipeline, cfg)?;
    let mut model = Model::new(cfg.model_config(), cfg.training.seed)?;
    if let Some(ssae) = &pipeline.ssae {
        model.load_ssae(ssae)?;
    }
    info!(
        "{}: {} train / {} validation / {} test windows, {} parameters",
        cfg.variant.tag(),
        train.len(),
        validation.len(),
        test.len(),
        model.params.scalar_count()
    );
    let log = train_model(&mut model, &train, &validation, &cfg.training)?;
    let (report, errors) = evaluate(&model, &test, cfg)?;
    Ok(Experiment {
        model,
        pipeline,
        log,
        report,
        errors,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Experiment, DataBundle)> {
    cfg.validate()?;
    let dataset = build_dataset(cfg)?;
    let bundle = split_dataset(dataset.windows, cfg)?;
    let exp = run_on_bundle(cfg, &bundle)?;
    Ok((exp, bundle))
}

/// Trains and evaluates each variant on one shared dataset and split.
pub fn ablate(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let dataset = build_dataset(cfg)?;
    let bundle = split_dataset(dataset.windows, cfg)?;
    variants
        .iter()
        .map(|&v| {
            let vc = ExperimentConfig {
                variant: v,
                ..cfg.clone()
            };
            Ok(run_on_bundle(&vc, &bundle)?.report)
        })
        .collect()
}
