//! Independent oracles shared by the integration tests: central finite
//! differences and direct-summation reference kernels.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trajcast::numerics::{Graph, Tensor, Var};
use trajcast::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a small denominator floor so that gradients which are
/// zero up to roundoff do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// element of every leaf input against central differences. Returns the
/// largest relative error.
pub fn check_leaves(
    inputs: &[Tensor],
    f: impl Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).unwrap().data()[0]
    };
    let mut worst: f64 = 0.0;
    for (which, t) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[which])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for k in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    worst
}

/// Reference dilated cross-correlation written as a plain quadruple loop over
/// explicit zero padding.
pub fn conv_oracle(input: &Tensor, kernels: &Tensor, dilation: usize) -> Tensor {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[3]);
    let ph = (kh - 1) * dilation / 2;
    let pw = (kw - 1) * dilation / 2;
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut padded = vec![0.0; hp * wp * cin];
    for r in 0..h {
        for c in 0..w {
            for k in 0..cin {
                padded[((r + ph) * wp + c + pw) * cin + k] = input.data()[(r * w + c) * cin + k];
            }
        }
    }
    let mut out = vec![0.0; h * w * cout];
    for r in 0..h {
        for c in 0..w {
            for o in 0..cout {
                let mut s = 0.0;
                for i in 0..kh {
                    for j in 0..kw {
                        for k in 0..cin {
                            let x = padded[((r + i * dilation) * wp + c + j * dilation) * cin + k];
                            let kv = kernels.data()[((i * kw + j) * cin + k) * cout + o];
                            s += x * kv;
                        }
                    }
                }
                out[(r * w + c) * cout + o] = s;
            }
        }
    }
    Tensor::new(&[h, w, cout], out).unwrap()
}

pub fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
            }
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// A fast experiment: a short synthetic scene, a tiny architecture and a
/// few autoencoder epochs.
pub fn small_experiment(seed: u64) -> trajcast::harness::ExperimentConfig {
    use trajcast::data::SyntheticConfig;
    use trajcast::social::{ConvLayerSpec, PoolSpec};
    let params = SyntheticConfig {
        vehicles: 14,
        duration_s: 12.0,
        road_length: 300.0,
        noise_sigma: 0.05,
        lane_change_prob: 0.4,
        ..SyntheticConfig::default()
    };
    let mut cfg = trajcast::harness::ExperimentConfig::synthetic(params, seed);
    let layer = |out_channels, dilation| ConvLayerSpec {
        out_channels,
        dilation,
        kernel: 3,
    };
    cfg.model.encoder_hidden = 6;
    cfg.model.decoder_hidden = 8;
    cfg.model.pool = PoolSpec {
        layers: vec![layer(4, 1), layer(3, 2), layer(2, 2)],
        leaky_alpha: 0.1,
        output_dim: 5,
    };
    cfg.ssae.sizes = vec![10, 6, 4];
    cfg.ssae.greedy_epochs = 3;
    cfg.ssae.joint_epochs = 3;
    cfg.preprocess.window_stride = 3;
    cfg.training.batch_size = 8;
    cfg.training.epochs = 2;
    cfg
}
