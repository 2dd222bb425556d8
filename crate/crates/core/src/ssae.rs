//! Stacked sparse autoencoder producing per-frame vehicle descriptors.
//!
//! Encoder layers are `f(W·x + b)`; each decoder layer reuses the transpose of
//! the matching encoder weight (tied weights) with its own bias, and the
//! reconstruction layer is linear. Training minimizes reconstruction MSE plus
//! a KL sparsity penalty on the code and weight decay on the weights.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kl_bernoulli, AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};

/// Clamp applied to mean activations before the KL term.
pub const RATE_CLAMP: f64 = 1e-6;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Linear => Ok(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsaeConfig {
    /// Input width followed by each code width.
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub rho: f64,
    pub mu: f64,
    pub lambda: f64,
    pub greedy_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without relative improvement of at least `min_improvement`
    /// before a stage stops early.
    pub patience: usize,
    pub min_improvement: f64,
    /// Training rows are subsampled (deterministically) to at most this many.
    pub max_samples: usize,
}

impl Default for SsaeConfig {
    fn default() -> Self {
        SsaeConfig {
            sizes: vec![10, 32, 16],
            activation: Activation::Relu,
            rho: 0.05,
            mu: 0.1,
            lambda: 1e-4,
            greedy_epochs: 200,
            joint_epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            patience: 20,
            min_improvement: 1e-4,
            max_samples: 4000,
        }
    }
}

impl SsaeConfig {
    pub fn descriptor_dim(&self) -> usize {
        *self.sizes.last().unwrap_or(&0)
    }

    fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(Error::Config(format!("autoencoder sizes {:?}", self.sizes)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) || self.mu < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("autoencoder needs rho in (0,1), mu ≥ 0, lambda ≥ 0".into()));
        }
        Ok(())
    }
}

/// Parameter handles of one autoencoder stack inside some [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsaeParams {
    pub enc_w: Vec<ParamId>,
    pub enc_b: Vec<ParamId>,
    pub dec_b: Vec<ParamId>,
}

impl SsaeParams {
    pub fn init(store: &mut ParamStore, sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut p = SsaeParams {
            enc_w: Vec::new(),
            enc_b: Vec::new(),
            dec_b: Vec::new(),
        };
        for (k, w) in sizes.windows(2).enumerate() {
            p.enc_w.push(store.insert_uniform(&format!("ssae.enc{k}.w"), &[w[1], w[0]], w[0], rng)?);
            p.enc_b.push(store.insert_uniform(&format!("ssae.enc{k}.b"), &[w[1]], w[0], rng)?);
            p.dec_b.push(store.insert_uniform(&format!("ssae.dec{k}.b"), &[w[0]], w[1], rng)?);
        }
        Ok(p)
    }

    /// Looks up the handles of a stack stored under the standard names.
    pub fn lookup(store: &ParamStore, layers: usize) -> Result<Self> {
        let mut p = SsaeParams {
            enc_w: Vec::new(),
            enc_b: Vec::new(),
            dec_b: Vec::new(),
        };
        for k in 0..layers {
            p.enc_w.push(store.id(&format!("ssae.enc{k}.w"))?);
            p.enc_b.push(store.id(&format!("ssae.enc{k}.b"))?);
            p.dec_b.push(store.id(&format!("ssae.dec{k}.b"))?);
        }
        Ok(p)
    }

    pub fn layers(&self) -> usize {
        self.enc_w.len()
    }

    fn var(g: &mut Graph<'_>, id: ParamId, trainable: bool) -> Result<Var> {
        if trainable {
            g.param(id)
        } else {
            g.param_frozen(id)
        }
    }

    /// Encoder layers `from..to` applied to `x` (rows are samples).
    pub fn encode_layers(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        act: Activation,
        from: usize,
        to: usize,
        trainable: bool,
    ) -> Result<Var> {
        let mut h = x;
        for k in from..to {
            let w = Self::var(g, self.enc_w[k], trainable)?;
            let b = Self::var(g, self.enc_b[k], trainable)?;
            let z = g.linear(h, w, Some(b))?;
            h = act.apply(g, z)?;
        }
        Ok(h)
    }

    pub fn encode(&self, g: &mut Graph<'_>, x: Var, act: Activation, trainable: bool) -> Result<Var> {
        self.encode_layers(g, x, act, 0, self.layers(), trainable)
    }

    /// Decoder layers `to..from` in reverse, ending with a linear layer when
    /// `to == 0`; intermediate decoder layers use the encoder activation.
    pub fn decode_layers(
        &self,
        g: &mut Graph<'_>,
        code: Var,
        act: Activation,
        from: usize,
        to: usize,
        trainable: bool,
    ) -> Result<Var> {
        let mut h = code;
        for k in (to..from).rev() {
            let w = Self::var(g, self.enc_w[k], trainable)?;
            let b = Self::var(g, self.dec_b[k], trainable)?;
            let z = g.linear_transposed(h, w, Some(b))?;
            h = if k == to { z } else { act.apply(g, z)? };
        }
        Ok(h)
    }

    pub fn decode(&self, g: &mut Graph<'_>, code: Var, act: Activation, trainable: bool) -> Result<Var> {
        self.decode_layers(g, code, act, self.layers(), 0, trainable)
    }
}

/// Recorded `Σ_j KL(ρ ‖ ρ̂_j)` where `ρ̂_j` is the batch mean of unit `j`'s
/// activation clamped to [0, 1], itself clamped to `[1e-6, 1 − 1e-6]`.
pub fn sparsity_penalty_graph(g: &mut Graph<'_>, activations: Var, rho: f64) -> Result<Var> {
    let a = g.clamp(activations, 0.0, 1.0)?;
    let m = if g.value(a)?.rank() == 2 { g.mean_axis0(a)? } else { a };
    let m = g.clamp(m, RATE_CLAMP, 1.0 - RATE_CLAMP)?;
    g.kl_sparsity(m, rho)
}

/// Sparsity penalty of a batch of code activations (`N×H`).
pub fn sparsity_penalty(activations: &Tensor, rho: f64) -> f64 {
    let (n, h) = activations.as_matrix_dims();
    (0..h)
        .map(|j| {
            let mean = (0..n)
                .map(|i| activations.data()[i * h + j].clamp(0.0, 1.0))
                .sum::<f64>()
                / n as f64;
            kl_bernoulli(rho, mean.clamp(RATE_CLAMP, 1.0 - RATE_CLAMP))
        })
        .sum()
}

/// Breakdown of the training objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub reconstruction: f64,
    pub sparsity: f64,
    pub weight_decay: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsaeModel {
    pub config: SsaeConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub handles: SsaeParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: SsaeModel,
}

impl SsaeModel {
    pub fn new(config: SsaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let handles = SsaeParams::init(&mut params, &config.sizes, &mut rng)?;
        Ok(SsaeModel {
            config,
            seed,
            params,
            handles,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c) = x.as_matrix_dims();
        if c != self.config.sizes[0] || x.rank() > 2 {
            return Err(Error::Dimension(format!(
                "autoencoder input {:?}, expected width {}",
                x.shape(),
                self.config.sizes[0]
            )));
        }
        Ok(())
    }

    /// Descriptors for a vector or a batch of rows.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::with_params(&self.params);
        let xv = g.constant(x.clone());
        let d = self.handles.encode(&mut g, xv, self.config.activation, false)?;
        Ok(g.value(d)?.clone())
    }

    pub fn decode(&self, d: &Tensor) -> Result<Tensor> {
        let (_, c) = d.as_matrix_dims();
        if c != self.config.descriptor_dim() || d.rank() > 2 {
            return Err(Error::Dimension(format!(
                "descriptor {:?}, expected width {}",
                d.shape(),
                self.config.descriptor_dim()
            )));
        }
        let mut g = Graph::with_params(&self.params);
        let dv = g.constant(d.clone());
        let z = self.handles.decode(&mut g, dv, self.config.activation, false)?;
        Ok(g.value(z)?.clone())
    }

    /// Records the objective for a batch (`N×sizes[0]`) over the whole stack.
    fn record_loss(&self, g: &mut Graph<'_>, batch: &Tensor) -> Result<(Var, Var, Var, Var)> {
        let c = &self.config;
        let x = g.constant(batch.clone());
        let d = self.handles.encode(g, x, c.activation, true)?;
        let z = self.handles.decode(g, d, c.activation, true)?;
        let diff = g.sub(z, x)?;
        let sq = g.square(diff)?;
        let mse = g.mean(sq)?;
        let kl = sparsity_penalty_graph(g, d, c.rho)?;
        let mut decay = None;
        for &w in &self.handles.enc_w {
            let wv = g.param(w)?;
            let s = g.square(wv)?;
            let s = g.sum(s)?;
            decay = Some(match decay {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        let decay = decay.expect("at least one layer");
        let a = g.scale(kl, c.mu)?;
        let b = g.scale(decay, c.lambda)?;
        let total = g.add(mse, a)?;
        let total = g.add(total, b)?;
        Ok((total, mse, kl, decay))
    }

    /// `MSE(S, Z) + μ·KL + λ·Σ‖W‖²` on a batch, term by term.
    pub fn sparse_loss(&self, batch: &Tensor) -> Result<LossTerms> {
        self.check_input(batch)?;
        let mut g = Graph::with_params(&self.params);
        let (t, m, k, d) = self.record_loss(&mut g, batch)?;
        let v = |x: Var| g.value(x).map(|t| t.data()[0]);
        Ok(LossTerms {
            reconstruction: v(m)?,
            sparsity: v(k)?,
            weight_decay: v(d)?,
            total: v(t)?,
        })
    }

    /// Gradient of the full objective with respect to every parameter.
    pub fn loss_gradients(&self, batch: &Tensor) -> Result<(f64, Vec<Option<Tensor>>)> {
        self.check_input(batch)?;
        let mut g = Graph::with_params(&self.params);
        let (t, ..) = self.record_loss(&mut g, batch)?;
        let loss = g.value(t)?.data()[0];
        Ok((loss, g.backward(t)?.into_params()))
    }

    /// Greedy layer-wise pretraining followed by joint fine-tuning.
    /// Deterministic for a fixed seed and data order.
    pub fn pretrain(data: &Tensor, config: SsaeConfig, seed: u64) -> Result<(Self, PretrainLog)> {
        let mut model = SsaeModel::new(config, seed)?;
        model.check_input(data)?;
        let (n, _) = data.as_matrix_dims();
        if n == 0 {
            return Err(Error::Fit("autoencoder training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ae5_5ae5);
        let data = subsample(data, model.config.max_samples, &mut rng)?;
        let mut log = PretrainLog::default();
        let layers = model.handles.layers();
        let mut codes = data.clone();
        for k in 0..layers {
            let curve = model.train_stage(&codes, Some(k), &mut rng)?;
            log.greedy.push(curve);
            let mut g = Graph::with_params(&model.params);
            let x = g.constant(codes.clone());
            let h = model.handles.encode_layers(&mut g, x, model.config.activation, k, k + 1, false)?;
            codes = g.value(h)?.clone();
        }
        log.joint = model.train_stage(&data, None, &mut rng)?;
        Ok((model, log))
    }

    /// Trains one greedy unit (`Some(k)`) or the full stack (`None`);
    /// returns the per-epoch mean loss.
    fn train_stage(&mut self, data: &Tensor, layer: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let c = self.config.clone();
        let epochs = if layer.is_some() { c.greedy_epochs } else { c.joint_epochs };
        let (n, width) = data.as_matrix_dims();
        let mut adam = AdamState::new(
            &self.params,
            AdamConfig {
                lr: c.lr,
                ..AdamConfig::default()
            },
        );
        let stage = match layer {
            Some(k) => format!("layer {k}"),
            None => "joint".to_string(),
        };
        let mut order: Vec<usize> = (0..n).collect();
        let mut curve = Vec::new();
        let (mut best, mut stale) = (f64::INFINITY, 0);
        for epoch in 0..epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(c.batch_size.max(1)) {
                let rows: Vec<f64> = chunk
                    .iter()
                    .flat_map(|&i| data.data()[i * width..(i + 1) * width].iter().copied())
                    .collect();
                let batch = Tensor::new(&[chunk.len(), width], rows)?;
                let mut g = Graph::with_params(&self.params);
                let loss = match layer {
                    Some(k) => self.record_unit_loss(&mut g, &batch, k)?,
                    None => self.record_loss(&mut g, &batch)?.0,
                };
                let value = g.value(loss)?.data()[0];
                if !value.is_finite() {
                    return Err(Error::Training(format!("autoencoder {stage}, epoch {epoch}: loss {value}")));
                }
                let grads = g
                    .backward(loss)
                    .map_err(|e| Error::Training(format!("autoencoder {stage}, epoch {epoch}: {e}")))?
                    .into_params();
                drop(g);
                adam.step(&mut self.params, &grads)
                    .map_err(|e| Error::Training(format!("autoencoder {stage}, epoch {epoch}: {e}")))?;
                total += value * chunk.len() as f64;
            }
            let mean = total / n as f64;
            curve.push(mean);
            if mean < best * (1.0 - c.min_improvement) {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= c.patience {
                    break;
                }
            }
        }
        Ok(curve)
    }

    /// Objective of greedy unit `k` alone, reconstructing its own input.
    fn record_unit_loss(&self, g: &mut Graph<'_>, batch: &Tensor, k: usize) -> Result<Var> {
        let c = &self.config;
        let x = g.constant(batch.clone());
        let h = self.handles.encode_layers(g, x, c.activation, k, k + 1, true)?;
        let z = self.handles.decode_layers(g, h, c.activation, k + 1, k, true)?;
        let diff = g.sub(z, x)?;
        let sq = g.square(diff)?;
        let mse = g.mean(sq)?;
        let kl = sparsity_penalty_graph(g, h, c.rho)?;
        let w = g.param(self.handles.enc_w[k])?;
        let w2 = g.square(w)?;
        let decay = g.sum(w2)?;
        let a = g.scale(kl, c.mu)?;
        let b = g.scale(decay, c.lambda)?;
        let t = g.add(mse, a)?;
        g.add(t, b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&doc)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut doc: Checkpoint = serde_json::from_str(&text)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported autoencoder checkpoint version {}", doc.version)));
        }
        doc.model.params.reindex();
        Ok(doc.model)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub greedy: Vec<Vec<f64>>,
    pub joint: Vec<f64>,
}

fn subsample(data: &Tensor, max: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (n, w) = data.as_matrix_dims();
    if n <= max || max == 0 {
        return Ok(data.clone());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(max);
    idx.sort_unstable();
    let rows = idx
        .iter()
        .flat_map(|&i| data.data()[i * w..(i + 1) * w].iter().copied())
        .collect();
    Tensor::new(&[max, w], rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_hand_value_and_zero() {
        let a = Tensor::from_rows(&[vec![0.5]]).unwrap();
        assert!((sparsity_penalty(&a, 0.05) - 0.4946).abs() < 1e-4);
        let z = Tensor::from_rows(&[vec![0.05, 0.05]]).unwrap();
        assert!(sparsity_penalty(&z, 0.05).abs() < 1e-12);
    }

    #[test]
    fn zero_model_encodes_to_zero() {
        let mut m = SsaeModel::new(SsaeConfig::default(), 1).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            m.params.get_mut(id).scale_assign(0.0);
        }
        let d = m.encode(&Tensor::vector(vec![0.3; 10])).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        let z = m.decode(&Tensor::vector(vec![0.0; 16])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matches!(m.encode(&Tensor::vector(vec![0.0; 9])), Err(Error::Dimension(_))));
    }
}
