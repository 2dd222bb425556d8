//! The full forecasting network: a shared LSTM history encoder, the social
//! grid and pooling stack, a maneuver classifier, and a maneuver-conditioned
//! LSTM decoder whose per-frame outputs parameterize bivariate Gaussians.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Maneuver;
use crate::error::{Error, Result};
use crate::numerics::{
    bvn_log_density, log_sum_exp, lstm_cell, softmax, Graph, LstmVars, ParamId, ParamStore, Tensor, Var,
};
use crate::preprocess::{PreprocessParams, Window};
use crate::social::{GridSpec, PoolParams, PoolSpec};
use crate::ssae::{Activation, SsaeModel, SsaeParams};

pub const NUM_MANEUVERS: usize = 3;
pub const SIGMA_MIN: f64 = 1e-3;
pub const RHO_MAX: f64 = 0.999;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Negative log of the maneuver-weighted mixture over all branches.
    Mixture,
    /// Labeled branch only, plus the classifier's cross-entropy.
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of one preprocessed frame.
    pub input_dim: usize,
    /// Autoencoder layer sizes (first equals `input_dim`); `None` feeds the
    /// preprocessed features straight into the history encoder.
    pub ssae_sizes: Option<Vec<usize>>,
    pub ssae_activation: Activation,
    pub freeze_ssae: bool,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub grid: GridSpec,
    pub pool: PoolSpec,
    /// Feed the ego encoding to the decoder alongside the social context.
    pub concat_ego: bool,
    /// Multiplier from raw decoder outputs to mean positions (feet).
    pub mu_scale: f64,
    /// Treat the raw mean outputs as per-step displacements and accumulate
    /// them, so a steady ramp needs only a constant output.
    pub cumulative_mean: bool,
    /// Add the ego's last observed per-frame displacement, extrapolated, to
    /// the means: the decoder then learns corrections to constant velocity.
    pub anchor_velocity: bool,
    pub future_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 10,
            ssae_sizes: Some(vec![10, 32, 16]),
            ssae_activation: Activation::Relu,
            freeze_ssae: false,
            encoder_hidden: 64,
            decoder_hidden: 128,
            grid: GridSpec::default(),
            pool: PoolSpec::default(),
            concat_ego: true,
            mu_scale: 1.0,
            cumulative_mean: true,
            anchor_velocity: true,
            future_len: 25,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if let Some(s) = &self.ssae_sizes {
            if s.len() < 2 || s[0] != self.input_dim {
                return Err(Error::Config(format!(
                    "autoencoder sizes {s:?} do not start at input width {}",
                    self.input_dim
                )));
            }
        }
        if self.input_dim == 0 || self.encoder_hidden == 0 || self.decoder_hidden == 0 || self.future_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.grid.rows == 0 || self.grid.cols == 0 || self.pool.layers.is_empty() {
            return Err(Error::Config("grid and pooling plan must be non-empty".into()));
        }
        if !(self.mu_scale > 0.0) {
            return Err(Error::Config("mu_scale must be positive".into()));
        }
        Ok(())
    }

    fn descriptor_dim(&self) -> usize {
        self.ssae_sizes.as_ref().map_or(self.input_dim, |s| *s.last().unwrap())
    }

    fn decoder_context_dim(&self) -> usize {
        self.pool.output_dim + if self.concat_ego { self.encoder_hidden } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmIds {
    fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(LstmIds {
            w_ih: store.insert_uniform(&format!("{prefix}.w_ih"), &[4 * hidden, input], hidden, rng)?,
            w_hh: store.insert_uniform(&format!("{prefix}.w_hh"), &[4 * hidden, hidden], hidden, rng)?,
            bias: store.insert_uniform(&format!("{prefix}.b"), &[4 * hidden], hidden, rng)?,
            hidden,
        })
    }

    fn vars(&self, g: &mut Graph<'_>) -> Result<LstmVars> {
        Ok(LstmVars {
            w_ih: g.param(self.w_ih)?,
            w_hh: g.param(self.w_hh)?,
            bias: g.param(self.bias)?,
            hidden: self.hidden,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub ssae: Option<SsaeParams>,
    pub encoder: LstmIds,
    pub pool: PoolParams,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub decoder: LstmIds,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// One bivariate Gaussian over a future position (feet).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GaussianParams {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
}

impl GaussianParams {
    fn from_row(r: &[f64]) -> Self {
        GaussianParams {
            mu_x: r[0],
            mu_y: r[1],
            sigma_x: r[2],
            sigma_y: r[3],
            rho: r[4],
        }
    }

    fn as_array(&self) -> [f64; 5] {
        [self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.rho]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrajectoryDistribution {
    /// Probabilities of keep, left, right.
    pub maneuver_probs: [f64; NUM_MANEUVERS],
    /// One sequence of per-frame Gaussians per maneuver, same order.
    pub branches: Vec<Vec<GaussianParams>>,
}

/// Exact bivariate normal log-density at `(x, y)`.
pub fn bvn_log_pdf(p: &GaussianParams, x: f64, y: f64) -> Result<f64> {
    let ok = p.as_array().iter().all(|v| v.is_finite())
        && p.sigma_x > 0.0
        && p.sigma_y > 0.0
        && p.rho.abs() < 1.0;
    if !ok {
        return Err(Error::Numeric(format!("bivariate normal parameters {p:?}")));
    }
    Ok(bvn_log_density(&p.as_array(), x, y))
}

/// Per-branch log-likelihood of `truth` (one position per frame).
pub fn branch_log_likelihoods(pred: &TrajectoryDistribution, truth: &[[f64; 2]]) -> Result<Vec<f64>> {
    pred.branches
        .iter()
        .map(|branch| {
            if branch.len() != truth.len() {
                return Err(Error::Dimension(format!(
                    "{} predicted frames for {} truth frames",
                    branch.len(),
                    truth.len()
                )));
            }
            branch
                .iter()
                .zip(truth)
                .map(|(p, t)| bvn_log_pdf(p, t[0], t[1]))
                .sum()
        })
        .collect()
}

/// `−log Σ_i P(m_i)·Π_k N(truth_k | θ_ik)`, evaluated in the log domain.
pub fn mixture_nll(pred: &TrajectoryDistribution, truth: &[[f64; 2]]) -> Result<f64> {
    let ll = branch_log_likelihoods(pred, truth)?;
    let terms: Vec<f64> = ll
        .iter()
        .zip(&pred.maneuver_probs)
        .map(|(l, p)| l + p.ln())
        .collect();
    Ok(-log_sum_exp(&terms))
}

/// Index of the largest probability; earlier maneuvers win exact ties.
pub fn argmax_maneuver(probs: &[f64; NUM_MANEUVERS]) -> Maneuver {
    let mut best = 0;
    for i in 1..NUM_MANEUVERS {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    Maneuver::from_index(best).expect("index within range")
}

/// Mean trajectory of the most probable maneuver branch.
pub fn point_forecast(pred: &TrajectoryDistribution) -> Vec<[f64; 2]> {
    pred.branches[argmax_maneuver(&pred.maneuver_probs).index()]
        .iter()
        .map(|p| [p.mu_x, p.mu_y])
        .collect()
}

/// Probability-weighted mean trajectory across branches.
pub fn weighted_forecast(pred: &TrajectoryDistribution) -> Vec<[f64; 2]> {
    let n = pred.branches[0].len();
    (0..n)
        .map(|k| {
            let mut acc = [0.0; 2];
            for (b, p) in pred.branches.iter().zip(&pred.maneuver_probs) {
                acc[0] += p * b[k].mu_x;
                acc[1] += p * b[k].mu_y;
            }
            acc
        })
        .collect()
}

/// A window turned into model inputs: preprocessed histories of every
/// vehicle, their grid cells, and the supervised future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedWindow {
    /// `vehicles·steps` rows of preprocessed frames, vehicle-major.
    pub history: Tensor,
    pub vehicles: usize,
    pub steps: usize,
    pub cells: Vec<Option<usize>>,
    pub collisions: usize,
    pub future: Vec<[f64; 2]>,
    /// Ego displacement over its last observed frame (feet).
    pub drift: [f64; 2],
    pub label: Maneuver,
    pub ego_id: u64,
    pub t: i64,
}

impl PreparedWindow {
    pub fn new(w: &Window, pre: &PreprocessParams, grid: &GridSpec) -> Result<Self> {
        let steps = w.ego().states.len();
        let mut rows = Vec::with_capacity(w.vehicles.len() * steps * pre.dim());
        for v in &w.vehicles {
            if v.states.len() != steps {
                return Err(Error::Dimension(format!(
                    "vehicle {} has {} history frames, ego has {steps}",
                    v.vehicle_id,
                    v.states.len()
                )));
            }
            for s in &v.states {
                rows.extend(pre.apply(s));
            }
        }
        let assignment = grid.resolve_cells(&w.current_states());
        let ego = &w.ego().states;
        let drift = match ego.len() {
            0 | 1 => [0.0, 0.0],
            n => [ego[n - 1].x - ego[n - 2].x, ego[n - 1].y - ego[n - 2].y],
        };
        Ok(PreparedWindow {
            history: Tensor::new(&[w.vehicles.len() * steps, pre.dim()], rows)?,
            vehicles: w.vehicles.len(),
            steps,
            cells: assignment.cells,
            collisions: assignment.collisions,
            future: w.future.clone(),
            drift,
            label: w.label,
            ego_id: w.ego_id,
            t: w.t,
        })
    }

    fn frame(&self, vehicle: usize, step: usize) -> &[f64] {
        let d = self.history.shape()[1];
        let r = vehicle * self.steps + step;
        &self.history.data()[r * d..(r + 1) * d]
    }
}

/// Vars produced by one recorded forward pass over a batch of `B` windows.
pub struct Forward {
    /// `B×3` log maneuver probabilities.
    pub log_probs: Var,
    /// Per future frame, `3B×5` Gaussian parameters; row `3b + m` is window
    /// `b` under maneuver `m`.
    pub steps: Vec<Var>,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub handles: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_hash: String,
    model: Model,
}

impl Model {
    /// Fresh weights, uniform in ±1/√fan-in.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ssae = match &config.ssae_sizes {
            Some(sizes) => Some(SsaeParams::init(&mut store, sizes, &mut rng)?),
            None => None,
        };
        let eh = config.encoder_hidden;
        let encoder = LstmIds::init(&mut store, "enc", config.descriptor_dim(), eh, &mut rng)?;
        let pool = config.pool.init(&mut store, eh, &config.grid, &mut rng)?;
        let cls_in = config.pool.output_dim + eh;
        let cls_w = store.insert_uniform("cls.w", &[NUM_MANEUVERS, cls_in], cls_in, &mut rng)?;
        let cls_b = store.insert_uniform("cls.b", &[NUM_MANEUVERS], cls_in, &mut rng)?;
        let dh = config.decoder_hidden;
        let dec_in = config.decoder_context_dim() + NUM_MANEUVERS;
        let decoder = LstmIds::init(&mut store, "dec", dec_in, dh, &mut rng)?;
        let head_w = store.insert_uniform("head.w", &[5, dh], dh, &mut rng)?;
        let head_b = store.insert_uniform("head.b", &[5], dh, &mut rng)?;
        Ok(Model {
            config,
            seed,
            params: store,
            handles: ModelParams {
                ssae,
                encoder,
                pool,
                cls_w,
                cls_b,
                decoder,
                head_w,
                head_b,
            },
        })
    }

    /// Copies pretrained autoencoder weights into this model.
    pub fn load_ssae(&mut self, ssae: &SsaeModel) -> Result<()> {
        let Some(sizes) = &self.config.ssae_sizes else {
            return Err(Error::Config("model has no autoencoder stage".into()));
        };
        if *sizes != ssae.config.sizes {
            return Err(Error::Config(format!(
                "autoencoder sizes {:?} do not match model {:?}",
                ssae.config.sizes, sizes
            )));
        }
        for (_, name, t) in ssae.params.iter() {
            let id = self.params.id(name)?;
            *self.params.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Per-step encoder inputs (`N×D` for the `N` vehicles of the batch),
    /// passed through the autoencoder when present.
    fn encoder_inputs(&self, g: &mut Graph<'_>, batch: &[&PreparedWindow]) -> Result<Vec<Var>> {
        let steps = batch[0].steps;
        let d = self.config.input_dim;
        if let Some(w) = batch.iter().find(|w| w.steps != steps || w.history.shape()[1] != d) {
            return Err(Error::Dimension(format!(
                "window of {} steps × {} features in a batch of {steps} × {d}",
                w.steps,
                w.history.shape()[1]
            )));
        }
        let n: usize = batch.iter().map(|w| w.vehicles).sum();
        let mut out = Vec::with_capacity(steps);
        for s in 0..steps {
            let mut rows = Vec::with_capacity(n * d);
            for w in batch {
                for v in 0..w.vehicles {
                    rows.extend_from_slice(w.frame(v, s));
                }
            }
            let x = g.constant(Tensor::new(&[n, d], rows)?);
            out.push(match &self.handles.ssae {
                Some(p) => {
                    if self.config.freeze_ssae {
                        p.encode(g, x, self.config.ssae_activation, false)?
                    } else {
                        p.encode(g, x, self.config.ssae_activation, true)?
                    }
                }
                None => x,
            });
        }
        Ok(out)
    }

    /// Runs the shared history encoder over rows of per-step inputs.
    fn run_encoder(&self, g: &mut Graph<'_>, inputs: &[Var]) -> Result<Var> {
        let n = g.value(inputs[0])?.as_matrix_dims().0;
        let eh = self.config.encoder_hidden;
        let cell = self.handles.encoder.vars(g)?;
        let mut h = g.constant(Tensor::zeros(&[n, eh]));
        let mut c = g.constant(Tensor::zeros(&[n, eh]));
        for &x in inputs {
            (h, c) = lstm_cell(g, &cell, Some(x), None, h, c)?;
        }
        Ok(h)
    }

    fn classifier(&self, g: &mut Graph<'_>, social: Var, ego: Var) -> Result<Var> {
        let input = g.concat_cols(&[social, ego])?;
        let (w, b) = (g.param(self.handles.cls_w)?, g.param(self.handles.cls_b)?);
        g.linear(input, w, Some(b))
    }

    /// Decodes `R` complete contexts (`R×C`) into per-step `R×5` parameters.
    /// `drift` (`R×2`, feet per frame) anchors the means when enabled.
    fn run_decoder(&self, g: &mut Graph<'_>, context: Var, drift: Option<&Tensor>) -> Result<Vec<Var>> {
        let r = g.value(context)?.as_matrix_dims().0;
        let dh = self.config.decoder_hidden;
        let cell = self.handles.decoder.vars(g)?;
        let proj = g.linear(context, cell.w_ih, None)?;
        let mut h = g.constant(Tensor::zeros(&[r, dh]));
        let mut c = g.constant(Tensor::zeros(&[r, dh]));
        let (hw, hb) = (g.param(self.handles.head_w)?, g.param(self.handles.head_b)?);
        let mut steps = Vec::with_capacity(self.config.future_len);
        let mut travelled: Option<Var> = None;
        let drift = drift.filter(|_| self.config.anchor_velocity);
        for k in 1..=self.config.future_len {
            (h, c) = lstm_cell(g, &cell, None, Some(proj), h, c)?;
            let mut raw = g.linear(h, hw, Some(hb))?;
            if self.config.cumulative_mean {
                let delta = g.slice_cols(raw, 0, 2)?;
                let spread = g.slice_cols(raw, 2, 5)?;
                let pos = match travelled {
                    Some(prev) => g.add(prev, delta)?,
                    None => delta,
                };
                travelled = Some(pos);
                raw = g.concat_cols(&[pos, spread])?;
            }
            if let Some(d) = drift {
                let mut anchor = Tensor::zeros(&[r, 5]);
                for i in 0..r {
                    anchor.data_mut()[i * 5] = d.data()[i * 2] * k as f64 / self.config.mu_scale;
                    anchor.data_mut()[i * 5 + 1] = d.data()[i * 2 + 1] * k as f64 / self.config.mu_scale;
                }
                let anchor = g.constant(anchor);
                raw = g.add(raw, anchor)?;
            }
            steps.push(g.gaussian_head(raw, self.config.mu_scale)?);
        }
        Ok(steps)
    }

    /// Records the forward pass for a batch of windows.
    pub fn forward(&self, g: &mut Graph<'_>, batch: &[&PreparedWindow]) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::Usage("forward pass over an empty batch".into()));
        }
        let inputs = self.encoder_inputs(g, batch)?;
        let enc = self.run_encoder(g, &inputs)?;
        let n: usize = batch.iter().map(|w| w.vehicles).sum();
        let grid = &self.config.grid;
        let eh = self.config.encoder_hidden;
        let (mut socials, mut egos) = (Vec::new(), Vec::new());
        let mut offset = 0;
        for w in batch {
            let mut targets = vec![None; n];
            targets[offset..offset + w.vehicles].copy_from_slice(&w.cells);
            let tensor = g.scatter_rows(enc, &targets, &[grid.rows, grid.cols, eh])?;
            socials.push(self.config.pool.forward(g, tensor, &self.handles.pool)?);
            egos.push(g.row(enc, offset)?);
            offset += w.vehicles;
        }
        let social = g.stack_rows(&socials)?;
        let ego = g.stack_rows(&egos)?;
        let logits = self.classifier(g, social, ego)?;
        let log_probs = g.log_softmax(logits)?;
        let ctx = if self.config.concat_ego {
            g.concat_cols(&[social, ego])?
        } else {
            social
        };
        // one row per (window, maneuver) pair, window-major
        let b = batch.len();
        let mut select = Tensor::zeros(&[NUM_MANEUVERS * b, b]);
        let mut onehot = Tensor::zeros(&[NUM_MANEUVERS * b, NUM_MANEUVERS]);
        for i in 0..b {
            for m in 0..NUM_MANEUVERS {
                select.data_mut()[(NUM_MANEUVERS * i + m) * b + i] = 1.0;
                onehot.data_mut()[(NUM_MANEUVERS * i + m) * NUM_MANEUVERS + m] = 1.0;
            }
        }
        let select = g.constant(select);
        let expanded = g.matmul(select, ctx)?;
        let onehot = g.constant(onehot);
        let complete = g.concat_cols(&[expanded, onehot])?;
        let mut drift = Vec::with_capacity(NUM_MANEUVERS * b * 2);
        for w in batch {
            for _ in 0..NUM_MANEUVERS {
                drift.extend_from_slice(&w.drift);
            }
        }
        let drift = Tensor::new(&[NUM_MANEUVERS * b, 2], drift)?;
        let steps = self.run_decoder(g, complete, Some(&drift))?;
        Ok(Forward {
            log_probs,
            steps,
            batch: b,
        })
    }

    /// Mean per-window loss over the batch.
    pub fn record_loss(&self, g: &mut Graph<'_>, batch: &[&PreparedWindow], mode: LossMode) -> Result<Var> {
        let fwd = self.forward(g, batch)?;
        let b = fwd.batch;
        let mut ll: Option<Var> = None;
        for (k, &step) in fwd.steps.iter().enumerate() {
            let mut target = Vec::with_capacity(NUM_MANEUVERS * b * 2);
            for w in batch {
                let p = w.future.get(k).ok_or_else(|| {
                    Error::Dimension(format!("window has {} future frames, need {}", w.future.len(), fwd.steps.len()))
                })?;
                for _ in 0..NUM_MANEUVERS {
                    target.extend_from_slice(p);
                }
            }
            let lp = g.bvn_log_pdf(step, &Tensor::new(&[NUM_MANEUVERS * b, 2], target)?)?;
            ll = Some(match ll {
                None => lp,
                Some(acc) => g.add(acc, lp)?,
            });
        }
        let ll = g.reshape(ll.expect("at least one future frame"), &[b, NUM_MANEUVERS])?;
        let joint = g.add(ll, fwd.log_probs)?;
        let total = match mode {
            LossMode::Mixture => {
                let per_window = g.log_sum_exp(joint)?;
                g.sum(per_window)?
            }
            LossMode::Teacher => {
                let mut mask = Tensor::zeros(&[b, NUM_MANEUVERS]);
                for (i, w) in batch.iter().enumerate() {
                    mask.data_mut()[i * NUM_MANEUVERS + w.label.index()] = 1.0;
                }
                let mask = g.constant(mask);
                let picked = g.mul(joint, mask)?;
                g.sum(picked)?
            }
        };
        g.scale(total, -1.0 / b as f64)
    }

    pub fn loss(&self, batch: &[&PreparedWindow], mode: LossMode) -> Result<f64> {
        let mut g = Graph::with_params(&self.params);
        let l = self.record_loss(&mut g, batch, mode)?;
        Ok(g.value(l)?.data()[0])
    }

    /// Loss and gradients for every parameter (`None` for frozen ones).
    pub fn loss_gradients(&self, batch: &[&PreparedWindow], mode: LossMode) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::with_params(&self.params);
        let l = self.record_loss(&mut g, batch, mode)?;
        let value = g.value(l)?.data()[0];
        let grads = g.backward(l)?;
        Ok((value, grads.into_params()))
    }

    /// Forecast distributions for a batch of windows.
    pub fn predict_batch(&self, batch: &[&PreparedWindow]) -> Result<Vec<TrajectoryDistribution>> {
        let mut g = Graph::with_params(&self.params);
        let fwd = self.forward(&mut g, batch)?;
        let lp = g.value(fwd.log_probs)?.clone();
        let step_values: Vec<Tensor> = fwd
            .steps
            .iter()
            .map(|&s| g.value(s).cloned())
            .collect::<Result<_>>()?;
        Ok((0..fwd.batch)
            .map(|i| {
                let row = &lp.data()[i * NUM_MANEUVERS..(i + 1) * NUM_MANEUVERS];
                let probs = softmax(row);
                TrajectoryDistribution {
                    maneuver_probs: [probs[0], probs[1], probs[2]],
                    branches: (0..NUM_MANEUVERS)
                        .map(|m| {
                            let r = NUM_MANEUVERS * i + m;
                            step_values
                                .iter()
                                .map(|t| GaussianParams::from_row(&t.data()[r * 5..(r + 1) * 5]))
                                .collect()
                        })
                        .collect(),
                }
            })
            .collect())
    }

    pub fn predict(&self, window: &PreparedWindow) -> Result<TrajectoryDistribution> {
        Ok(self.predict_batch(&[window])?.remove(0))
    }

    /// Final encoder hidden state of one history (`steps×input_dim` rows,
    /// oldest first).
    pub fn encode_history(&self, history: &Tensor) -> Result<Tensor> {
        let (steps, d) = history.as_matrix_dims();
        if steps == 0 || history.rank() != 2 {
            return Err(Error::InsufficientHistory("encoder needs a non-empty sequence".into()));
        }
        if d != self.config.input_dim {
            return Err(Error::Dimension(format!("history width {d}, model expects {}", self.config.input_dim)));
        }
        let mut g = Graph::with_params(&self.params);
        let mut inputs = Vec::with_capacity(steps);
        for s in 0..steps {
            let x = g.constant(Tensor::new(&[1, d], history.row(s).to_vec())?);
            inputs.push(match &self.handles.ssae {
                Some(p) => p.encode(&mut g, x, self.config.ssae_activation, false)?,
                None => x,
            });
        }
        let h = self.run_encoder(&mut g, &inputs)?;
        g.value(h)?.reshaped(&[self.config.encoder_hidden])
    }

    /// Maneuver probabilities from a social context and an ego encoding.
    pub fn classify_maneuver(&self, social: &Tensor, ego: &Tensor) -> Result<[f64; NUM_MANEUVERS]> {
        let mut g = Graph::with_params(&self.params);
        let s = g.constant(social.reshaped(&[1, social.len()])?);
        let e = g.constant(ego.reshaped(&[1, ego.len()])?);
        let logits = self.classifier(&mut g, s, e)?;
        let p = softmax(g.value(logits)?.data());
        Ok([p[0], p[1], p[2]])
    }

    /// Per-frame Gaussians for one complete context vector, without any
    /// velocity anchor.
    pub fn decode_trajectory(&self, complete: &Tensor) -> Result<Vec<GaussianParams>> {
        let want = self.config.decoder_context_dim() + NUM_MANEUVERS;
        if complete.len() != want {
            return Err(Error::Dimension(format!("complete context of {}, expected {want}", complete.len())));
        }
        let mut g = Graph::with_params(&self.params);
        let c = g.constant(complete.reshaped(&[1, want])?);
        let steps = self.run_decoder(&mut g, c, None)?;
        steps
            .iter()
            .map(|&s| Ok(GaussianParams::from_row(g.value(s)?.data())))
            .collect()
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let doc = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&doc)?).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, returning the model and the config hash it carries.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut doc: Checkpoint = serde_json::from_str(&text)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", doc.version)));
        }
        doc.model.params.reindex();
        Ok((doc.model, doc.config_hash))
    }
}
