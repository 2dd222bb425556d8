//! Dense row-major tensors of `f64` and the eager (non-recording) kernels
//! shared by the computation record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(&[r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns when the tensor is viewed as a matrix; vectors are a single row.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.as_matrix_dims();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Dimension(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `C[m×n] += alpha · op(A) · op(B)` where `op` optionally transposes a
/// row-major operand. `a` is stored as `m×k` (or `k×m` when `ta`), `b` as
/// `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and the strides describe the
    // row-major layout of each operand, so every access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard matrix product of an `m×k` and a `k×n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "matmul of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm_acc(m, k, n, 1.0, &a.data, false, &b.data, false, &mut out);
    Tensor::new(&[m, n], out)
}

/// Elementwise `max(x, alpha·x)`.
pub fn leaky_relu(x: &Tensor, alpha: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { alpha * v })
}

/// Derivative of leaky-ReLU; the subgradient at zero is `alpha`.
pub fn leaky_relu_grad(v: f64, alpha: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        alpha
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax over a vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| x - lse).collect()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Zero padding on each side that keeps the grid extent for an odd kernel.
pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    (kernel - 1) * dilation / 2
}

pub(crate) fn check_conv_shapes(
    input: &[usize],
    kernels: &[usize],
    dilation: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if input.len() != 3 || kernels.len() != 4 {
        return Err(Error::Dimension(format!(
            "conv expects H×W×Cin input and kh×kw×Cin×Cout kernels, got {input:?} and {kernels:?}"
        )));
    }
    let (h, w, cin) = (input[0], input[1], input[2]);
    let (kh, kw, kcin, cout) = (kernels[0], kernels[1], kernels[2], kernels[3]);
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if dilation == 0 {
        return Err(Error::Dimension("dilation must be positive".into()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Dimension(format!(
            "same padding needs odd kernel extents, got {kh}×{kw}"
        )));
    }
    let (ph, pw) = (same_padding(kh, dilation), same_padding(kw, dilation));
    let span_h = (kh - 1) * dilation + 1;
    let span_w = (kw - 1) * dilation + 1;
    if span_h > h + 2 * ph || span_w > w + 2 * pw {
        return Err(Error::Dimension(format!(
            "effective kernel span {span_h}×{span_w} exceeds padded input {}×{}",
            h + 2 * ph,
            w + 2 * pw
        )));
    }
    Ok((h, w, cin, kh, kw, cout))
}

/// Same-zero-padded dilated 2-D cross-correlation on a channels-last grid.
///
/// `out[r, c, o] = Σ_{i, j, k} in[r + (i − ci)·d, c + (j − cj)·d, k] · K[i, j, k, o]`
/// with `ci = (kh − 1)/2`, `cj = (kw − 1)/2` and out-of-grid taps reading zero.
pub fn dilated_conv2d(input: &Tensor, kernels: &Tensor, dilation: usize) -> Result<Tensor> {
    let (h, w, cin, kh, kw, cout) = check_conv_shapes(input.shape(), kernels.shape(), dilation)?;
    let mut out = vec![0.0; h * w * cout];
    conv_forward(
        input.data(),
        kernels.data(),
        (h, w, cin, kh, kw, cout),
        dilation,
        &mut out,
    );
    Tensor::new(&[h, w, cout], out)
}

/// Iterates over every valid (output cell, tap, input cell) triple.
#[inline]
pub(crate) fn for_each_tap(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (ch, cw) = ((kh - 1) / 2, (kw - 1) / 2);
    for r in 0..h {
        for c in 0..w {
            let out_cell = r * w + c;
            for i in 0..kh {
                let rr = r as isize + (i as isize - ch as isize) * dilation as isize;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for j in 0..kw {
                    let cc = c as isize + (j as isize - cw as isize) * dilation as isize;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    f(out_cell, i * kw + j, rr as usize * w + cc as usize);
                }
            }
        }
    }
}

pub(crate) fn conv_forward(
    input: &[f64],
    kernels: &[f64],
    dims: (usize, usize, usize, usize, usize, usize),
    dilation: usize,
    out: &mut [f64],
) {
    let (h, w, cin, kh, kw, cout) = dims;
    for_each_tap(h, w, kh, kw, dilation, |o, tap, src| {
        let x = &input[src * cin..(src + 1) * cin];
        let y = &mut out[o * cout..(o + 1) * cout];
        let kbase = tap * cin * cout;
        for (ci, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let krow = &kernels[kbase + ci * cout..kbase + (ci + 1) * cout];
            for (yv, &kv) in y.iter_mut().zip(krow) {
                *yv += xv * kv;
            }
        }
    });
}

/// Weights of one LSTM cell. Gate blocks are stacked in the order
/// input, forget, candidate, output along the first axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `4h × din`
    pub w_ih: Tensor,
    /// `4h × h`
    pub w_hh: Tensor,
    /// `4h`
    pub bias: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[1]
    }
}

/// One step of a standard LSTM cell:
/// `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step(x: &Tensor, h: &Tensor, c: &Tensor, p: &LstmParams) -> Result<(Tensor, Tensor)> {
    let hd = p.w_hh.shape().get(1).copied().unwrap_or(0);
    if p.w_hh.rank() != 2
        || p.w_ih.rank() != 2
        || p.w_hh.shape()[0] != 4 * hd
        || p.w_ih.shape()[0] != 4 * hd
        || p.bias.len() != 4 * hd
        || x.len() != p.w_ih.shape()[1]
        || h.len() != hd
        || c.len() != hd
    {
        return Err(Error::Dimension(format!(
            "lstm_step: x {:?}, h {:?}, c {:?}, w_ih {:?}, w_hh {:?}",
            x.shape(),
            h.shape(),
            c.shape(),
            p.w_ih.shape(),
            p.w_hh.shape()
        )));
    }
    let mut pre = p.bias.data().to_vec();
    gemm_acc(1, x.len(), 4 * hd, 1.0, x.data(), false, p.w_ih.data(), true, &mut pre);
    gemm_acc(1, hd, 4 * hd, 1.0, h.data(), false, p.w_hh.data(), true, &mut pre);
    let mut hn = vec![0.0; hd];
    let mut cn = vec![0.0; hd];
    for j in 0..hd {
        let i = sigmoid(pre[j]);
        let f = sigmoid(pre[hd + j]);
        let g = pre[2 * hd + j].tanh();
        let o = sigmoid(pre[3 * hd + j]);
        cn[j] = f * c.data()[j] + i * g;
        hn[j] = o * cn[j].tanh();
    }
    Ok((Tensor::vector(hn), Tensor::vector(cn)))
}
