//! Reverse-mode computation record.
//!
//! Every op evaluates eagerly and appends a node holding its value and the
//! indices of its inputs. [`Graph::backward`] walks the nodes in reverse and
//! accumulates one gradient per parameter and per leaf.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::params::{ParamId, ParamStore};
use super::tensor::{self, gemm_acc, sigmoid, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: usize,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Param(usize),
    Leaf,
    Constant,
    /// `y = x·Wᵀ + b` (W is `out×in`), or `y = x·W + b` when `tw` (W is `in×out`).
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        tw: bool,
    },
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Square(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumAxis0(usize),
    MeanAxis0(usize),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    StackRows(Vec<usize>),
    Row(usize, usize),
    BroadcastRows(usize),
    Reshape(usize),
    ScatterRows {
        src: usize,
        targets: Vec<Option<usize>>,
    },
    Conv2d {
        x: usize,
        k: usize,
        b: Option<usize>,
        dilation: usize,
    },
    LstmPointwise {
        pre: usize,
        c: usize,
    },
    LogSoftmax(usize),
    LogSumExp(usize),
    GaussianHead(usize, f64),
    BvnLogPdf {
        p: usize,
        target: Tensor,
    },
    KlSparsity(usize, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Linear { .. } => "linear",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Square(_) => "square",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis0(_) => "sum_axis0",
            Op::MeanAxis0(_) => "mean_axis0",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::StackRows(_) => "stack_rows",
            Op::Row(..) => "row",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Reshape(_) => "reshape",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Conv2d { .. } => "dilated_conv2d",
            Op::LstmPointwise { .. } => "lstm_pointwise",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::GaussianHead(..) => "gaussian_head",
            Op::BvnLogPdf { .. } => "bvn_log_pdf",
            Op::KlSparsity(..) => "kl_sparsity",
        }
    }
}

struct Node {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: HashMap<usize, Tensor>,
    graph: usize,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.leaves.get(&v.index)
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

/// The computation record of one forward pass.
pub struct Graph<'p> {
    id: usize,
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<(usize, bool), usize>,
    nonfinite: Option<String>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &str, detail: String) -> Error {
    Error::Dimension(format!("{op}: {detail}"))
}

impl<'p> Graph<'p> {
    /// A record without parameters; use leaves and constants as inputs.
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            nonfinite: None,
        }
    }

    /// A record reading parameters from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node_value(&self, i: usize) -> &Tensor {
        let node = &self.nodes[i];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(pid)) => self
                .store
                .expect("parameter node without store")
                .get(ParamId(*pid)),
            _ => unreachable!("node without value"),
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {v:?} does not belong to this record"
            )));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(self.node_value(self.idx(v)?))
    }

    /// First op that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match &self.nonfinite {
            Some(op) => Err(Error::Numeric(op.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(op.name().to_string());
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Trainable parameter from the attached store; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.param_node(id, true)
    }

    /// Parameter read as a constant (no gradient flows into it).
    pub fn param_frozen(&mut self, id: ParamId) -> Result<Var> {
        self.param_node(id, false)
    }

    fn param_node(&mut self, id: ParamId, trainable: bool) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Usage("record has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::Usage(format!("unknown parameter id {}", id.0)));
        }
        if let Some(&i) = self.param_nodes.get(&(id.0, trainable)) {
            return Ok(Var {
                graph: self.id,
                index: i,
            });
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id.0),
            needs_grad: trainable,
        });
        let i = self.nodes.len() - 1;
        self.param_nodes.insert((id.0, trainable), i);
        Ok(Var {
            graph: self.id,
            index: i,
        })
    }

    /// Differentiable input; its gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.linear_impl(x, w, b, false)
    }

    /// `x·W + b` with `W` stored as `in×out`; used for tied decoder weights.
    pub fn linear_transposed(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.linear_impl(x, w, b, true)
    }

    fn linear_impl(&mut self, x: Var, w: Var, b: Option<Var>, tw: bool) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let (xv, wv) = (self.node_value(xi), self.node_value(wi));
        if wv.rank() != 2 {
            return Err(dim_err("linear", format!("weight shape {:?}", wv.shape())));
        }
        let (din, dout) = if tw {
            (wv.shape()[0], wv.shape()[1])
        } else {
            (wv.shape()[1], wv.shape()[0])
        };
        let (rows, cols) = xv.as_matrix_dims();
        if cols != din || xv.rank() > 2 {
            return Err(dim_err(
                "linear",
                format!("input {:?} against weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let mut out = vec![0.0; rows * dout];
        if let Some(bi) = bi {
            let bv = self.node_value(bi);
            if bv.len() != dout {
                return Err(dim_err("linear", format!("bias {:?} for {dout} outputs", bv.shape())));
            }
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
            }
        }
        gemm_acc(rows, din, dout, 1.0, xv.data(), false, wv.data(), !tw, &mut out);
        let shape = if xv.rank() == 1 {
            vec![dout]
        } else {
            vec![rows, dout]
        };
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        let needs = self.needs(&inputs);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
                tw,
            },
            needs,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let v = tensor::matmul(self.node_value(ai), self.node_value(bi))?;
        let needs = self.needs(&[ai, bi]);
        Ok(self.push(v, Op::MatMul(ai, bi), needs))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (self.node_value(ai), self.node_value(bi));
        if av.shape() != bv.shape() {
            return Err(dim_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ai, bi, Tensor::new(av.shape(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(&[ai, bi]);
        Ok(self.push(v, Op::Add(ai, bi), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(&[ai, bi]);
        Ok(self.push(v, Op::Sub(ai, bi), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(&[ai, bi]);
        Ok(self.push(v, Op::Mul(ai, bi), needs))
    }

    fn unary(&mut self, a: Var, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = self.node_value(ai).map(f);
        let needs = self.needs(&[ai]);
        Ok(self.push(v, op(ai), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |i| Op::Scale(i, s), |x| x * s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Ln, f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(a, |i| Op::LeakyRelu(i, alpha), |x| if x > 0.0 { x } else { alpha * x })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square, |x| x * x)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |i| Op::Clamp(i, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = Tensor::scalar(self.node_value(ai).sum());
        let needs = self.needs(&[ai]);
        Ok(self.push(v, Op::Sum(ai), needs))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.node_value(ai);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let needs = self.needs(&[ai]);
        Ok(self.push(v, Op::Mean(ai), needs))
    }

    fn axis0(&mut self, a: Var, mean: bool) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.node_value(ai);
        let (r, c) = t.as_matrix_dims();
        let mut out = vec![0.0; c];
        for row in t.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        if mean {
            out.iter_mut().for_each(|o| *o /= r as f64);
        }
        let needs = self.needs(&[ai]);
        let op = if mean { Op::MeanAxis0(ai) } else { Op::SumAxis0(ai) };
        Ok(self.push(Tensor::new(&[c], out)?, op, needs))
    }

    /// Column sums of a matrix.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        self.axis0(a, false)
    }

    /// Column means of a matrix.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        self.axis0(a, true)
    }

    /// Columns `start..end` of a matrix (or elements of a vector).
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.node_value(ai);
        let (r, c) = t.as_matrix_dims();
        if start >= end || end > c || t.rank() > 2 {
            return Err(dim_err("slice_cols", format!("{start}..{end} of {:?}", t.shape())));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in t.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let shape = if t.rank() == 1 { vec![w] } else { vec![r, w] };
        let needs = self.needs(&[ai]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SliceCols(ai, start, end), needs))
    }

    /// Concatenates along the last axis; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        if idx.is_empty() {
            return Err(dim_err("concat_cols", "no inputs".into()));
        }
        let rank = self.node_value(idx[0]).rank();
        let rows = self.node_value(idx[0]).as_matrix_dims().0;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let t = self.node_value(i);
            let (r, c) = t.as_matrix_dims();
            if r != rows || t.rank() != rank || rank > 2 {
                return Err(dim_err("concat_cols", format!("part shape {:?}", t.shape())));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.node_value(i).data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let needs = self.needs(&idx);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatCols(idx), needs))
    }

    /// Stacks matrices (or vectors, as single rows) with equal widths.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        if idx.is_empty() {
            return Err(dim_err("stack_rows", "no inputs".into()));
        }
        let width = self.node_value(idx[0]).as_matrix_dims().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let t = self.node_value(i);
            let (r, c) = t.as_matrix_dims();
            if c != width || t.rank() > 2 {
                return Err(dim_err("stack_rows", format!("part shape {:?}", t.shape())));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        let needs = self.needs(&idx);
        Ok(self.push(Tensor::new(&[rows, width], out)?, Op::StackRows(idx), needs))
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.node_value(ai);
        let (rows, c) = t.as_matrix_dims();
        if r >= rows || t.rank() != 2 {
            return Err(dim_err("row", format!("row {r} of {:?}", t.shape())));
        }
        let v = Tensor::new(&[c], t.data()[r * c..(r + 1) * c].to_vec())?;
        let needs = self.needs(&[ai]);
        Ok(self.push(v, Op::Row(ai, r), needs))
    }

    /// Repeats a vector as `n` identical rows.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.node_value(ai);
        if t.rank() != 1 || n == 0 {
            return Err(dim_err("broadcast_rows", format!("{:?} × {n}", t.shape())));
        }
        let c = t.len();
        let v = Tensor::new(&[n, c], t.data().repeat(n))?;
        let needs = self.needs(&[ai]);
        Ok(self.push(v, Op::BroadcastRows(ai), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = self.node_value(ai).reshaped(shape)?;
        let needs = self.needs(&[ai]);
        Ok(self.push(v, Op::Reshape(ai), needs))
    }

    /// Places row `i` of `src` at row `targets[i]` of a zero tensor of
    /// `out_shape` (viewed as rows of the source width); `None` drops the row.
    pub fn scatter_rows(&mut self, src: Var, targets: &[Option<usize>], out_shape: &[usize]) -> Result<Var> {
        let si = self.idx(src)?;
        let t = self.node_value(si);
        let (r, c) = t.as_matrix_dims();
        let total: usize = out_shape.iter().product();
        if targets.len() != r || *out_shape.last().unwrap_or(&0) != c || !total.is_multiple_of(c) {
            return Err(dim_err(
                "scatter_rows",
                format!("{:?} into {out_shape:?} with {} targets", t.shape(), targets.len()),
            ));
        }
        let out_rows = total / c;
        let mut out = vec![0.0; total];
        let mut used = vec![false; out_rows];
        for (i, tgt) in targets.iter().enumerate() {
            if let Some(o) = *tgt {
                if o >= out_rows || used[o] {
                    return Err(dim_err("scatter_rows", format!("target row {o} invalid or reused")));
                }
                used[o] = true;
                out[o * c..(o + 1) * c].copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let needs = self.needs(&[si]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::ScatterRows {
                src: si,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Same-zero-padded dilated cross-correlation with optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(k)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let mut out = tensor::dilated_conv2d(self.node_value(xi), self.node_value(ki), dilation)?;
        if let Some(bi) = bi {
            let bv = self.node_value(bi);
            let cout = *out.shape().last().unwrap();
            if bv.len() != cout {
                return Err(dim_err("conv2d", format!("bias {:?} for {cout} channels", bv.shape())));
            }
            for cell in out.data_mut().chunks_exact_mut(cout) {
                for (o, bb) in cell.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut inputs = vec![xi, ki];
        inputs.extend(bi);
        let needs = self.needs(&inputs);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: xi,
                k: ki,
                b: bi,
                dilation,
            },
            needs,
        ))
    }

    /// Gate nonlinearities of an LSTM cell. `pre` holds the stacked gate
    /// pre-activations (`B×4h`, order i, f, g, o), `c` the previous cell state
    /// (`B×h`). Returns `B×2h` holding `[h' | c']`.
    pub fn lstm_pointwise(&mut self, pre: Var, c: Var) -> Result<Var> {
        let (pi, ci) = (self.idx(pre)?, self.idx(c)?);
        let (pv, cv) = (self.node_value(pi), self.node_value(ci));
        let (b, h) = cv.as_matrix_dims();
        if pv.as_matrix_dims() != (b, 4 * h) || pv.rank() != cv.rank() {
            return Err(dim_err(
                "lstm_pointwise",
                format!("pre {:?} with cell {:?}", pv.shape(), cv.shape()),
            ));
        }
        let mut out = vec![0.0; b * 2 * h];
        for r in 0..b {
            let p = &pv.data()[r * 4 * h..(r + 1) * 4 * h];
            let cp = &cv.data()[r * h..(r + 1) * h];
            let o = &mut out[r * 2 * h..(r + 1) * 2 * h];
            for j in 0..h {
                let ig = sigmoid(p[j]);
                let fg = sigmoid(p[h + j]);
                let gg = p[2 * h + j].tanh();
                let og = sigmoid(p[3 * h + j]);
                let cn = fg * cp[j] + ig * gg;
                o[h + j] = cn;
                o[j] = og * cn.tanh();
            }
        }
        let shape = if cv.rank() == 1 { vec![2 * h] } else { vec![b, 2 * h] };
        let needs = self.needs(&[pi, ci]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LstmPointwise { pre: pi, c: ci }, needs))
    }

    /// Log-softmax of a vector, or of every row of a matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.node_value(ai);
        if t.rank() > 2 {
            return Err(dim_err("log_softmax", format!("{:?}", t.shape())));
        }
        let (_, c) = t.as_matrix_dims();
        let data: Vec<f64> = t.data().chunks_exact(c).flat_map(tensor::log_softmax).collect();
        let v = Tensor::new(t.shape(), data)?;
        let needs = self.needs(&[ai]);
        Ok(self.push(v, Op::LogSoftmax(ai), needs))
    }

    /// Log-sum-exp of a vector (scalar result), or of every row of a matrix
    /// (one value per row).
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.node_value(ai);
        if t.rank() > 2 {
            return Err(dim_err("log_sum_exp", format!("{:?}", t.shape())));
        }
        let (rows, c) = t.as_matrix_dims();
        let data: Vec<f64> = t.data().chunks_exact(c).map(tensor::log_sum_exp).collect();
        let v = if t.rank() == 2 {
            Tensor::new(&[rows], data)?
        } else {
            Tensor::scalar(data[0])
        };
        let needs = self.needs(&[ai]);
        Ok(self.push(v, Op::LogSumExp(ai), needs))
    }

    /// Maps raw `R×5` decoder outputs to bivariate-Gaussian parameters:
    /// `mu = scale·raw`, `sigma = max(exp(raw), 1e-3)`, `rho = 0.999·tanh(raw)`.
    pub fn gaussian_head(&mut self, a: Var, mu_scale: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.node_value(ai);
        if t.rank() != 2 || t.shape()[1] != 5 {
            return Err(dim_err("gaussian_head", format!("{:?}", t.shape())));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(5) {
            row[0] *= mu_scale;
            row[1] *= mu_scale;
            row[2] = row[2].exp().max(SIGMA_FLOOR);
            row[3] = row[3].exp().max(SIGMA_FLOOR);
            row[4] = RHO_LIMIT * row[4].tanh();
        }
        let v = Tensor::new(t.shape(), out)?;
        let needs = self.needs(&[ai]);
        Ok(self.push(v, Op::GaussianHead(ai, mu_scale), needs))
    }

    /// Row-wise bivariate normal log-density of `target` (`R×2`, constant)
    /// under parameters `p` (`R×5`: muX, muY, sigmaX, sigmaY, rho).
    pub fn bvn_log_pdf(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let pi = self.idx(p)?;
        let pv = self.node_value(pi);
        if pv.rank() != 2 || pv.shape()[1] != 5 || target.shape() != [pv.shape()[0], 2] {
            return Err(dim_err(
                "bvn_log_pdf",
                format!("params {:?} with target {:?}", pv.shape(), target.shape()),
            ));
        }
        let out: Vec<f64> = pv
            .data()
            .chunks_exact(5)
            .zip(target.data().chunks_exact(2))
            .map(|(q, t)| bvn_log_density(q, t[0], t[1]))
            .collect();
        let v = Tensor::new(&[out.len()], out)?;
        let needs = self.needs(&[pi]);
        Ok(self.push(
            v,
            Op::BvnLogPdf {
                p: pi,
                target: target.clone(),
            },
            needs,
        ))
    }

    /// `Σ_j KL(rho ‖ a_j)` for a vector of mean activations already inside (0, 1).
    pub fn kl_sparsity(&mut self, a: Var, rho: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = self.node_value(ai);
        let v = Tensor::scalar(t.data().iter().map(|&q| kl_bernoulli(rho, q)).sum());
        let needs = self.needs(&[ai]);
        Ok(self.push(v, Op::KlSparsity(ai, rho), needs))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.idx(output)?;
        if self.node_value(out).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.node_value(out).shape()
            )));
        }
        self.check_finite()?;
        let n_params = self.store.map(ParamStore::len).unwrap_or(0);
        let mut grads: Vec<Option<Tensor>> = vec![None; out + 1];
        grads[out] = Some(Tensor::new(self.node_value(out).shape(), vec![1.0])?);
        let mut result = Gradients {
            params: vec![None; n_params],
            leaves: HashMap::new(),
            graph: self.id,
        };
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Param(pid) => {
                    match &mut result.params[*pid] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                    continue;
                }
                Op::Leaf => {
                    result.leaves.insert(i, g);
                    continue;
                }
                _ => {}
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(result)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], j: usize) -> Option<&'g mut Tensor> {
        if !self.nodes[j].needs_grad {
            return None;
        }
        let shape = self.node_value(j).shape().to_vec();
        Some(grads[j].get_or_insert_with(|| Tensor::zeros(&shape)))
    }

    fn backprop_unary(&self, a: usize, g: &Tensor, grads: &mut [Option<Tensor>], d: impl Fn(usize) -> f64) {
        if let Some(ga) = self.grad_slot(grads, a) {
            for (k, (acc, gv)) in ga.data_mut().iter_mut().zip(g.data()).enumerate() {
                *acc += gv * d(k);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = self.node_value(i);
        match &self.nodes[i].op {
            Op::Param(_) | Op::Leaf | Op::Constant => {}
            Op::Linear { x, w, b, tw } => {
                let (xv, wv) = (self.node_value(*x), self.node_value(*w));
                let (rows, din) = xv.as_matrix_dims();
                let dout = y.as_matrix_dims().1;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    // gx += g·W  (W: out×in)  or  g·Wᵀ  (W: in×out)
                    gemm_acc(rows, dout, din, 1.0, g.data(), false, wv.data(), *tw, gx.data_mut());
                }
                if let Some(gw) = self.grad_slot(grads, *w) {
                    if *tw {
                        gemm_acc(din, rows, dout, 1.0, xv.data(), true, g.data(), false, gw.data_mut());
                    } else {
                        gemm_acc(dout, rows, din, 1.0, g.data(), true, xv.data(), false, gw.data_mut());
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.grad_slot(grads, *b) {
                        for row in g.data().chunks_exact(dout) {
                            for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.node_value(*a), self.node_value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm_acc(m, n, k, 1.0, g.data(), false, bv.data(), true, ga.data_mut());
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm_acc(k, m, n, 1.0, av.data(), true, g.data(), false, gb.data_mut());
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (acc, v) in gb.data_mut().iter_mut().zip(g.data()) {
                        *acc += sign * v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.node_value(*a), self.node_value(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((acc, gv), bb) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *acc += gv * bb;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((acc, gv), aa) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *acc += gv * aa;
                    }
                }
            }
            Op::Scale(a, s) => self.backprop_unary(*a, g, grads, |_| *s),
            Op::Sigmoid(a) => {
                let yd = y.data();
                self.backprop_unary(*a, g, grads, |k| yd[k] * (1.0 - yd[k]))
            }
            Op::Tanh(a) => {
                let yd = y.data();
                self.backprop_unary(*a, g, grads, |k| 1.0 - yd[k] * yd[k])
            }
            Op::Exp(a) => {
                let yd = y.data();
                self.backprop_unary(*a, g, grads, |k| yd[k])
            }
            Op::Ln(a) => {
                let xd = self.node_value(*a).data();
                self.backprop_unary(*a, g, grads, |k| 1.0 / xd[k])
            }
            Op::Relu(a) => {
                let xd = self.node_value(*a).data();
                self.backprop_unary(*a, g, grads, |k| if xd[k] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::LeakyRelu(a, alpha) => {
                let xd = self.node_value(*a).data();
                self.backprop_unary(*a, g, grads, |k| tensor::leaky_relu_grad(xd[k], *alpha))
            }
            Op::Square(a) => {
                let xd = self.node_value(*a).data();
                self.backprop_unary(*a, g, grads, |k| 2.0 * xd[k])
            }
            Op::Clamp(a, lo, hi) => {
                let xd = self.node_value(*a).data();
                self.backprop_unary(*a, g, grads, |k| {
                    if xd[k] >= *lo && xd[k] <= *hi {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|v| *v += gv);
                }
            }
            Op::Mean(a) => {
                let n = self.node_value(*a).len() as f64;
                let gv = g.data()[0] / n;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|v| *v += gv);
                }
            }
            Op::SumAxis0(a) | Op::MeanAxis0(a) => {
                let (r, c) = self.node_value(*a).as_matrix_dims();
                let s = if matches!(self.nodes[i].op, Op::MeanAxis0(_)) {
                    1.0 / r as f64
                } else {
                    1.0
                };
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for row in ga.data_mut().chunks_exact_mut(c) {
                        for (acc, gv) in row.iter_mut().zip(g.data()) {
                            *acc += s * gv;
                        }
                    }
                }
            }
            Op::SliceCols(a, start, end) => {
                let c = self.node_value(*a).as_matrix_dims().1;
                let w = end - start;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (row, grow) in ga.data_mut().chunks_exact_mut(c).zip(g.data().chunks_exact(w)) {
                        for (acc, gv) in row[*start..*end].iter_mut().zip(grow) {
                            *acc += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.as_matrix_dims().1;
                let mut offset = 0;
                for &p in parts {
                    let w = self.node_value(p).as_matrix_dims().1;
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for (row, grow) in gp.data_mut().chunks_exact_mut(w).zip(g.data().chunks_exact(total)) {
                            for (acc, gv) in row.iter_mut().zip(&grow[offset..offset + w]) {
                                *acc += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.node_value(p).len();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for (acc, gv) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *acc += gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::Row(a, r) => {
                let c = g.len();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (acc, gv) in ga.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.data()) {
                        *acc += gv;
                    }
                }
            }
            Op::BroadcastRows(a) => {
                let c = self.node_value(*a).len();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for row in g.data().chunks_exact(c) {
                        for (acc, gv) in ga.data_mut().iter_mut().zip(row) {
                            *acc += gv;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (acc, gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *acc += gv;
                    }
                }
            }
            Op::ScatterRows { src, targets } => {
                let c = self.node_value(*src).as_matrix_dims().1;
                if let Some(gs) = self.grad_slot(grads, *src) {
                    for (r, tgt) in targets.iter().enumerate() {
                        if let Some(o) = tgt {
                            for (acc, gv) in gs.data_mut()[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g.data()[o * c..(o + 1) * c])
                            {
                                *acc += gv;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, dilation } => {
                let (xv, kv) = (self.node_value(*x), self.node_value(*k));
                let (h, w, cin, kh, kw, cout) =
                    tensor::check_conv_shapes(xv.shape(), kv.shape(), *dilation)?;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let gxd = gx.data_mut();
                    tensor::for_each_tap(h, w, kh, kw, *dilation, |o, tap, src| {
                        let go = &g.data()[o * cout..(o + 1) * cout];
                        let kbase = tap * cin * cout;
                        for ci in 0..cin {
                            let krow = &kv.data()[kbase + ci * cout..kbase + (ci + 1) * cout];
                            gxd[src * cin + ci] += krow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
                if let Some(gk) = self.grad_slot(grads, *k) {
                    let gkd = gk.data_mut();
                    tensor::for_each_tap(h, w, kh, kw, *dilation, |o, tap, src| {
                        let go = &g.data()[o * cout..(o + 1) * cout];
                        let kbase = tap * cin * cout;
                        for ci in 0..cin {
                            let xv_ = xv.data()[src * cin + ci];
                            if xv_ == 0.0 {
                                continue;
                            }
                            for (acc, gv) in gkd[kbase + ci * cout..kbase + (ci + 1) * cout].iter_mut().zip(go) {
                                *acc += xv_ * gv;
                            }
                        }
                    });
                }
                if let Some(b) = b {
                    if let Some(gb) = self.grad_slot(grads, *b) {
                        for cell in g.data().chunks_exact(cout) {
                            for (acc, gv) in gb.data_mut().iter_mut().zip(cell) {
                                *acc += gv;
                            }
                        }
                    }
                }
            }
            Op::LstmPointwise { pre, c } => {
                let (pv, cv) = (self.node_value(*pre), self.node_value(*c));
                let (b, h) = cv.as_matrix_dims();
                let mut dpre = vec![0.0; b * 4 * h];
                let mut dc = vec![0.0; b * h];
                for r in 0..b {
                    let p = &pv.data()[r * 4 * h..(r + 1) * 4 * h];
                    let cp = &cv.data()[r * h..(r + 1) * h];
                    let gr = &g.data()[r * 2 * h..(r + 1) * 2 * h];
                    let yr = &y.data()[r * 2 * h..(r + 1) * 2 * h];
                    for j in 0..h {
                        let ig = sigmoid(p[j]);
                        let fg = sigmoid(p[h + j]);
                        let gg = p[2 * h + j].tanh();
                        let og = sigmoid(p[3 * h + j]);
                        let tc = yr[h + j].tanh();
                        let dct = gr[h + j] + gr[j] * og * (1.0 - tc * tc);
                        let dp = &mut dpre[r * 4 * h..(r + 1) * 4 * h];
                        dp[j] = dct * gg * ig * (1.0 - ig);
                        dp[h + j] = dct * cp[j] * fg * (1.0 - fg);
                        dp[2 * h + j] = dct * ig * (1.0 - gg * gg);
                        dp[3 * h + j] = gr[j] * tc * og * (1.0 - og);
                        dc[r * h + j] = dct * fg;
                    }
                }
                if let Some(gp) = self.grad_slot(grads, *pre) {
                    for (acc, v) in gp.data_mut().iter_mut().zip(&dpre) {
                        *acc += v;
                    }
                }
                if let Some(gc) = self.grad_slot(grads, *c) {
                    for (acc, v) in gc.data_mut().iter_mut().zip(&dc) {
                        *acc += v;
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let (_, c) = y.as_matrix_dims();
                let yd = y.data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((acc, gr), yr) in ga
                        .data_mut()
                        .chunks_exact_mut(c)
                        .zip(g.data().chunks_exact(c))
                        .zip(yd.chunks_exact(c))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for k in 0..c {
                            acc[k] += gr[k] - yr[k].exp() * gsum;
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let xv = self.node_value(*a);
                let (_, c) = xv.as_matrix_dims();
                let xd = xv.data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (r, acc) in ga.data_mut().chunks_exact_mut(c).enumerate() {
                        let p = tensor::softmax(&xd[r * c..(r + 1) * c]);
                        for (a, pk) in acc.iter_mut().zip(p) {
                            *a += g.data()[r] * pk;
                        }
                    }
                }
            }
            Op::GaussianHead(a, scale) => {
                let xd = self.node_value(*a).data();
                let yd = y.data();
                self.backprop_unary(*a, g, grads, |k| match k % 5 {
                    0 | 1 => *scale,
                    2 | 3 => {
                        if xd[k].exp() > SIGMA_FLOOR {
                            yd[k]
                        } else {
                            0.0
                        }
                    }
                    _ => {
                        let t = xd[k].tanh();
                        RHO_LIMIT * (1.0 - t * t)
                    }
                })
            }
            Op::BvnLogPdf { p, target } => {
                let pv = self.node_value(*p);
                if let Some(gp) = self.grad_slot(grads, *p) {
                    for (((acc, q), t), gv) in gp
                        .data_mut()
                        .chunks_exact_mut(5)
                        .zip(pv.data().chunks_exact(5))
                        .zip(target.data().chunks_exact(2))
                        .zip(g.data())
                    {
                        let d = bvn_log_density_grad(q, t[0], t[1]);
                        for (a, dv) in acc.iter_mut().zip(d) {
                            *a += gv * dv;
                        }
                    }
                }
            }
            Op::KlSparsity(a, rho) => {
                let xd = self.node_value(*a).data();
                let gv = g.data()[0];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (acc, &q) in ga.data_mut().iter_mut().zip(xd) {
                        *acc += gv * (-rho / q + (1.0 - rho) / (1.0 - q));
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) const SIGMA_FLOOR: f64 = 1e-3;
pub(crate) const RHO_LIMIT: f64 = 0.999;

/// `KL(rho ‖ q)` between Bernoulli rates.
pub fn kl_bernoulli(rho: f64, q: f64) -> f64 {
    rho * (rho / q).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - q)).ln()
}

/// Log-density of a bivariate normal; `q = [muX, muY, sigmaX, sigmaY, rho]`.
pub fn bvn_log_density(q: &[f64], x: f64, y: f64) -> f64 {
    let (mx, my, sx, sy, rho) = (q[0], q[1], q[2], q[3], q[4]);
    let zx = (x - mx) / sx;
    let zy = (y - my) / sy;
    let r = 1.0 - rho * rho;
    let quad = zx * zx + zy * zy - 2.0 * rho * zx * zy;
    -(2.0 * std::f64::consts::PI).ln() - sx.ln() - sy.ln() - 0.5 * r.ln() - quad / (2.0 * r)
}

fn bvn_log_density_grad(q: &[f64], x: f64, y: f64) -> [f64; 5] {
    let (mx, my, sx, sy, rho) = (q[0], q[1], q[2], q[3], q[4]);
    let zx = (x - mx) / sx;
    let zy = (y - my) / sy;
    let r = 1.0 - rho * rho;
    let quad = zx * zx + zy * zy - 2.0 * rho * zx * zy;
    let ax = zx - rho * zy;
    let ay = zy - rho * zx;
    [
        ax / (r * sx),
        ay / (r * sy),
        -1.0 / sx + zx * ax / (r * sx),
        -1.0 / sy + zy * ay / (r * sy),
        rho / r + zx * zy / r - quad * rho / (r * r),
    ]
}
