//! Minimal differentiable-computation core: dense tensors, a reverse-mode
//! computation record, dilated convolution, the LSTM cell and Adam.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{bvn_log_density, kl_bernoulli, Gradients, Graph, Var};
pub use params::{NamedTensor, ParamId, ParamStore};
pub use tensor::{
    dilated_conv2d, leaky_relu, leaky_relu_grad, log_softmax, log_sum_exp, lstm_step, matmul,
    same_padding, sigmoid, softmax, LstmParams, Tensor,
};

use crate::error::Result;

/// Recorded LSTM weights for one cell inside a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub hidden: usize,
}

/// One recorded LSTM step over a batch of rows. `x_proj`, when given, is a
/// precomputed `x·W_ihᵀ` (the decoder feeds the same input at every step).
pub fn lstm_cell(
    g: &mut Graph<'_>,
    cell: &LstmVars,
    x: Option<Var>,
    x_proj: Option<Var>,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let rec = g.linear(h, cell.w_hh, Some(cell.bias))?;
    let input = match (x_proj, x) {
        (Some(p), _) => p,
        (None, Some(x)) => g.linear(x, cell.w_ih, None)?,
        (None, None) => {
            return Err(crate::error::Error::Usage(
                "lstm_cell needs an input or its projection".into(),
            ))
        }
    };
    let pre = g.add(rec, input)?;
    let hc = g.lstm_pointwise(pre, c)?;
    let hn = g.slice_cols(hc, 0, cell.hidden)?;
    let cn = g.slice_cols(hc, cell.hidden, 2 * cell.hidden)?;
    Ok((hn, cn))
}
