//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] with one or more seed gradients walks the tape in
//! reverse and returns gradients for every parameter and every node that
//! requires them. Frozen parameters and constants never receive gradients,
//! so anything computed only from them is skipped on the way back.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over a channels-last feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding.0).saturating_sub(self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding.1).saturating_sub(self.kernel.1) / self.stride.1 + 1
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Arc<Vec<usize>>),
    MaskRows(Var, Arc<Vec<bool>>),
    Im2Col1d(Var, usize, usize),
    Im2Col2d(Var, Conv2dGeom),
    Reshape(Var),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy(Var, Arc<Vec<usize>>),
    LogMeanExp(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    grad: bool,
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    params_trainable: bool,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    dropout: Option<ChaCha8Rng>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a parameter, if it received any.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to any node that required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

impl<'s> Graph<'s> {
    /// Graph whose parameters come from `store`; non-frozen parameters
    /// receive gradients.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            params_trainable: true,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
            dropout: None,
        }
    }

    /// Graph without a parameter store, for pure tensor computations.
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            params_trainable: false,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            dropout: None,
        }
    }

    /// Treats every parameter as a constant.
    pub fn with_constant_params(mut self) -> Self {
        self.params_trainable = false;
        self
    }

    /// Enables dropout with masks drawn from the given seed. Without this the
    /// graph is deterministic and [`Graph::dropout`] is the identity.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        self.dropout = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn is_deterministic(&self) -> bool {
        self.dropout.is_none()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let grad = self.params_trainable && !store.is_frozen(id);
        self.nodes.push(Node {
            value: store.get_arc(id),
            op: Op::Param(id),
            grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.needs(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.needs(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.needs(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(
            r.shape(),
            (1, x.cols()),
            "add_row expects a 1x{} row",
            x.cols()
        );
        let mut out = x.clone();
        let rv = r.data();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(rv) {
                *o += b;
            }
        }
        let g = self.needs(&[a, row]);
        self.push(out, Op::AddRow(a, row), g)
    }

    /// Multiplies every row of `a` element-wise by a `1 × C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(
            r.shape(),
            (1, x.cols()),
            "mul_row expects a 1x{} row",
            x.cols()
        );
        let mut out = x.clone();
        let rv = r.data();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(rv) {
                *o *= b;
            }
        }
        let g = self.needs(&[a, row]);
        self.push(out, Op::MulRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let g = self.needs(&[a]);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let g = self.needs(&[a]);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let g = self.needs(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let g = self.needs(&[a]);
        self.push(v, Op::Transpose(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.needs(&[a]);
        self.push(v, Op::Relu(a), g)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let g = self.needs(&[a]);
        self.push(v, Op::Elu(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let g = self.needs(&[a]);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let g = self.needs(&[a]);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let g = self.needs(&[a]);
        self.push(v, Op::Exp(a), g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let g = self.needs(&[a]);
        self.push(v, Op::Abs(a), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let g = self.needs(&[a]);
        self.push(v, Op::Square(a), g)
    }

    /// Row-wise softmax. Entries where `mask` is false get weight exactly
    /// zero; a fully masked row produces all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), x.len(), "softmax mask size");
        }
        let v = softmax_rows(x, mask);
        let g = self.needs(&[a]);
        self.push(v, Op::Softmax(a), g)
    }

    /// Per-row normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let g = self.needs(&[a]);
        self.push(out, Op::LayerNorm(a, eps), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let g = self.needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r)
                .copy_from_slice(&x.row(r)[start..start + len]);
        }
        let g = self.needs(&[a]);
        self.push(out, Op::SliceCols(a, start), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::vstack(&ts);
        let g = self.needs(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let g = self.needs(&[a]);
        self.push(v, Op::SliceRows(a, start), g)
    }

    /// Output row `r` is row `idx[r]` of `a` (embedding lookup, length
    /// regulation, permutation).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        assert!(
            idx.iter().all(|&i| i < x.rows()),
            "gather index out of range"
        );
        let v = x.select_rows(&idx);
        let g = self.needs(&[a]);
        self.push(v, Op::Gather(a, Arc::new(idx)), g)
    }

    /// Zeroes rows whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(mask.len(), v.rows(), "row mask length");
        for (r, &keep) in mask.iter().enumerate() {
            if !keep {
                v.row_mut(r).fill(0.0);
            }
        }
        let g = self.needs(&[a]);
        self.push(v, Op::MaskRows(a, mask), g)
    }

    /// Unfolds `L × C` into `L × (k·C)` windows with `pad_left` zero rows
    /// before the sequence and enough after to keep length `L`.
    pub fn im2col_1d(&mut self, a: Var, kernel: usize, pad_left: usize) -> Var {
        let x = self.value(a);
        let (len, c) = x.shape();
        let mut out = Tensor::zeros(len, kernel * c);
        for t in 0..len {
            let row = out.row_mut(t);
            for o in 0..kernel {
                let src = t as isize + o as isize - pad_left as isize;
                if src >= 0 && (src as usize) < len {
                    row[o * c..(o + 1) * c].copy_from_slice(x.row(src as usize));
                }
            }
        }
        let g = self.needs(&[a]);
        self.push(out, Op::Im2Col1d(a, kernel, pad_left), g)
    }

    /// Unfolds a channels-last `(H·W) × C` map into
    /// `(H_out·W_out) × (kh·kw·C)` patches.
    pub fn im2col_2d(&mut self, a: Var, geom: Conv2dGeom) -> Var {
        let x = self.value(a);
        assert_eq!(
            x.shape(),
            (geom.height * geom.width, geom.channels),
            "im2col_2d geometry"
        );
        let c = geom.channels;
        let mut out = Tensor::zeros(
            geom.out_height() * geom.out_width(),
            geom.kernel.0 * geom.kernel.1 * c,
        );
        for_each_patch(&geom, |orow, ocol, src| {
            out.row_mut(orow)[ocol..ocol + c].copy_from_slice(x.row(src));
        });
        let g = self.needs(&[a]);
        self.push(out, Op::Im2Col2d(a, geom), g)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshape(rows, cols);
        let g = self.needs(&[a]);
        self.push(v, Op::Reshape(a), g)
    }

    /// Column means, `1 × C`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        let g = self.needs(&[a]);
        self.push(v, Op::MeanRows(a), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let g = self.needs(&[a]);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let g = self.needs(&[a]);
        self.push(v, Op::MeanAll(a), g)
    }

    /// Mean cross-entropy of `R × K` logits against one label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let x = self.value(logits);
        assert_eq!(labels.len(), x.rows(), "one label per row");
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            assert!(
                y < x.cols(),
                "label {y} out of range for {} classes",
                x.cols()
            );
            let row = x.row(r);
            total += log_sum_exp(row) - row[y];
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        let g = self.needs(&[logits]);
        self.push(v, Op::CrossEntropy(logits, Arc::new(labels)), g)
    }

    /// `log(mean(exp(x)))` over all entries, max-shifted.
    pub fn log_mean_exp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(log_sum_exp(x.data()) - (x.len() as f64).ln());
        let g = self.needs(&[a]);
        self.push(v, Op::LogMeanExp(a), g)
    }

    /// Inverted dropout; identity in deterministic graphs or when `rate` is 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let Some(rng) = self.dropout.as_mut() else {
            return a;
        };
        let (r, c) = self.nodes[a.0].value.shape();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let m = self.constant(Tensor::from_vec(r, c, mask));
        self.mul(a, m)
    }

    /// Reverse pass. Each seed is `(node, d loss / d node)`.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(
                g.shape(),
                self.nodes[v.0].value.shape(),
                "seed gradient shape"
            );
            if self.nodes[v.0].grad {
                accumulate(&mut grads, v.0, g.clone());
                last = last.max(v.0 + 1);
            }
        }
        let mut params = BTreeMap::new();
        for i in (0..last).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if let Op::Param(id) = node.op {
                params.insert(id, g.clone());
            }
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &*node.value;
        let want = |v: &Var| self.nodes[v.0].grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if want(a) {
                    accumulate(grads, a.0, g.clone());
                }
                if want(b) {
                    accumulate(grads, b.0, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    accumulate(grads, a.0, g.clone());
                }
                if want(b) {
                    accumulate(grads, b.0, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    accumulate(grads, a.0, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if want(b) {
                    accumulate(grads, b.0, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if want(a) {
                    accumulate(grads, a.0, g.clone());
                }
                if want(row) {
                    accumulate(grads, row.0, sum_over_rows(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if want(a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, s) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    accumulate(grads, a.0, ga);
                }
                if want(row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(grads, row.0, sum_over_rows(&prod));
                }
            }
            Op::Scale(a, s) => accumulate(grads, a.0, g.scale(*s)),
            Op::AddScalar(a) => accumulate(grads, a.0, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(a) {
                    accumulate_gemm(grads, a.0, g, false, bv, true);
                }
                if want(b) {
                    accumulate_gemm(grads, b.0, av, true, g, false);
                }
            }
            Op::Transpose(a) => accumulate(grads, a.0, g.transpose()),
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(
                    grads,
                    a.0,
                    g.zip_map(x, |d, x| if x > 0.0 { d } else { 0.0 }),
                );
            }
            Op::Elu(a) => {
                let x = self.value(*a);
                let d = Tensor::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(y.data())
                        .zip(g.data())
                        .map(|((&x, &y), &g)| if x > 0.0 { g } else { g * (y + 1.0) })
                        .collect(),
                );
                accumulate(grads, a.0, d);
            }
            Op::Tanh(a) => accumulate(grads, a.0, g.zip_map(y, |d, y| d * (1.0 - y * y))),
            Op::Sigmoid(a) => accumulate(grads, a.0, g.zip_map(y, |d, y| d * y * (1.0 - y))),
            Op::Exp(a) => accumulate(grads, a.0, g.zip_map(y, |d, y| d * y)),
            Op::Abs(a) => {
                let x = self.value(*a);
                accumulate(grads, a.0, g.zip_map(x, |d, x| d * sign(x)));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                accumulate(grads, a.0, g.zip_map(x, |d, x| 2.0 * d * x));
            }
            Op::Softmax(a) => {
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                accumulate(grads, a.0, d);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let n = x.cols() as f64;
                for r in 0..x.rows() {
                    let (_, var) = mean_var(x.row(r));
                    let inv = 1.0 / (var + eps).sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gm = gr.iter().sum::<f64>() / n;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv * (gv - gm - yv * gy);
                    }
                }
                accumulate(grads, a.0, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if want(p) {
                        let mut d = Tensor::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        accumulate(grads, p.0, d);
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, a.0, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if want(p) {
                        accumulate(grads, p.0, g.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, a.0, d);
            }
            Op::Gather(a, idx) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, a.0, d);
            }
            Op::MaskRows(a, mask) => {
                let mut d = g.clone();
                for (r, &keep) in mask.iter().enumerate() {
                    if !keep {
                        d.row_mut(r).fill(0.0);
                    }
                }
                accumulate(grads, a.0, d);
            }
            Op::Im2Col1d(a, kernel, pad_left) => {
                let x = self.value(*a);
                let (len, c) = x.shape();
                let mut d = Tensor::zeros(len, c);
                for t in 0..len {
                    let gr = g.row(t);
                    for o in 0..*kernel {
                        let src = t as isize + o as isize - *pad_left as isize;
                        if src >= 0 && (src as usize) < len {
                            for (dv, gv) in d
                                .row_mut(src as usize)
                                .iter_mut()
                                .zip(&gr[o * c..(o + 1) * c])
                            {
                                *dv += gv;
                            }
                        }
                    }
                }
                accumulate(grads, a.0, d);
            }
            Op::Im2Col2d(a, geom) => {
                let c = geom.channels;
                let mut d = Tensor::zeros(geom.height * geom.width, c);
                for_each_patch(geom, |orow, ocol, src| {
                    for (dv, gv) in d.row_mut(src).iter_mut().zip(&g.row(orow)[ocol..ocol + c]) {
                        *dv += gv;
                    }
                });
                accumulate(grads, a.0, d);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, a.0, g.clone().reshape(r, c));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let inv = 1.0 / x.rows() as f64;
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (o, v) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                accumulate(grads, a.0, d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, a.0, Tensor::full(r, c, g.data()[0]));
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                let v = g.data()[0] / x.len() as f64;
                accumulate(grads, a.0, Tensor::full(x.rows(), x.cols(), v));
            }
            Op::CrossEntropy(a, labels) => {
                let x = self.value(*a);
                let mut d = softmax_rows(x, None);
                let scale = g.data()[0] / labels.len() as f64;
                for (r, &lab) in labels.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[lab] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, a.0, d);
            }
            Op::LogMeanExp(a) => {
                let x = self.value(*a);
                let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e = x.map(|v| (v - m).exp());
                let z = e.sum();
                let s = g.data()[0] / z;
                accumulate(grads, a.0, e.scale(s));
            }
        }
    }
}

fn for_each_patch(geom: &Conv2dGeom, mut f: impl FnMut(usize, usize, usize)) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let c = geom.channels;
    for oy in 0..ho {
        for ox in 0..wo {
            let orow = oy * wo + ox;
            for ky in 0..kh {
                let iy = (oy * sh + ky) as isize - ph as isize;
                if iy < 0 || iy as usize >= geom.height {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * sw + kx) as isize - pw as isize;
                    if ix < 0 || ix as usize >= geom.width {
                        continue;
                    }
                    let src = iy as usize * geom.width + ix as usize;
                    f(orow, (ky * kw + kx) * c, src);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_gemm(
    grads: &mut [Option<Tensor>],
    i: usize,
    a: &Tensor,
    ta: bool,
    b: &Tensor,
    tb: bool,
) {
    let m = if ta { a.cols() } else { a.rows() };
    let n = if tb { b.rows() } else { b.cols() };
    match &mut grads[i] {
        Some(existing) => gemm(a, ta, b, tb, existing, 1.0),
        slot @ None => {
            let mut out = Tensor::zeros(m, n);
            gemm(a, ta, b, tb, &mut out, 0.0);
            *slot = Some(out);
        }
    }
}

fn sum_over_rows(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for row in g.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Max-shifted `log Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let cols = x.cols();
    for r in 0..x.rows() {
        let xr = x.row(r);
        let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let mut m = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if keep(j) && v > m {
                m = v;
            }
        }
        if m == f64::NEG_INFINITY {
            continue;
        }
        let orow = out.row_mut(r);
        let mut z = 0.0;
        for j in 0..cols {
            if keep(j) {
                let e = (xr[j] - m).exp();
                orow[j] = e;
                z += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    out
}
