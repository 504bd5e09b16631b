//! Parameterised building blocks shared by every model component.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Conv2dGeom, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// 1-D convolution along the row (time/phoneme) axis with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), kernel * in_ch, out_ch, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_ch));
        Conv1d {
            weight,
            bias,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = g.im2col_1d(x, self.kernel, (self.kernel - 1) / 2);
        let w = g.param(self.weight);
        let y = g.matmul(cols, w);
        let b = g.param(self.bias);
        g.add_row(y, b)
    }
}

/// 2-D convolution over a channels-last `(H·W) × C` map.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel.0 * kernel.1 * in_ch;
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, out_ch, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_ch));
        Conv2d {
            weight,
            bias,
            in_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn geometry(&self, height: usize, width: usize) -> Conv2dGeom {
        Conv2dGeom {
            height,
            width,
            channels: self.in_ch,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Returns the output map and its `(height, width)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        height: usize,
        width: usize,
    ) -> (Var, (usize, usize)) {
        let geom = self.geometry(height, width);
        let cols = g.im2col_2d(x, geom);
        let w = g.param(self.weight);
        let y = g.matmul(cols, w);
        let b = g.param(self.bias);
        (g.add_row(y, b), (geom.out_height(), geom.out_width()))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, self.eps);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// Scaled dot-product multi-head attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `queries × keys` weight matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    /// `attn_dim` is split evenly across `heads`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        attn_dim: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads > 0 && attn_dim % heads == 0,
            "attention width {attn_dim} not divisible by {heads} heads"
        );
        MultiHeadAttention {
            query: Linear::new(
                store,
                &format!("{name}.query"),
                query_dim,
                attn_dim,
                true,
                rng,
            ),
            key: Linear::new(store, &format!("{name}.key"), kv_dim, attn_dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), kv_dim, attn_dim, true, rng),
            output: Linear::new(
                store,
                &format!("{name}.output"),
                attn_dim,
                out_dim,
                true,
                rng,
            ),
            heads,
            head_dim: attn_dim / heads,
        }
    }

    /// `mask[i * keys + j]` false excludes key `j` for query `i`.
    pub fn forward(
        &self,
        g: &mut Graph,
        q_in: Var,
        kv_in: Var,
        mask: Option<&[bool]>,
    ) -> AttentionOutput {
        let q = self.query.forward(g, q_in);
        let k = self.key.forward(g, kv_in);
        let v = self.value.forward(g, kv_in);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * self.head_dim;
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, off, self.head_dim),
                    g.slice_cols(k, off, self.head_dim),
                    g.slice_cols(v, off, self.head_dim),
                )
            };
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores, mask);
            outs.push(g.matmul(w, vh));
            weights.push(w);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        AttentionOutput {
            out: self.output.forward(g, cat),
            weights,
        }
    }
}

/// A bank of learnable tokens attended by a query sequence. Keys and values
/// both read `tanh(token)`.
#[derive(Clone, Debug)]
pub struct StyleTokenLayer {
    pub tokens: ParamId,
    pub attention: MultiHeadAttention,
    pub n_tokens: usize,
}

impl StyleTokenLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        n_tokens: usize,
        token_dim: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(n_tokens >= 1, "need at least one style token");
        let tokens = store.add(
            format!("{name}.tokens"),
            Tensor::randn(n_tokens, token_dim, 0.5, rng),
        );
        let attention = MultiHeadAttention::new(
            store,
            &format!("{name}.attention"),
            query_dim,
            token_dim,
            out_dim,
            out_dim,
            heads,
            rng,
        );
        StyleTokenLayer {
            tokens,
            attention,
            n_tokens,
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var) -> AttentionOutput {
        let tokens = g.param(self.tokens);
        let bank = g.tanh(tokens);
        self.attention.forward(g, query, bank, None)
    }
}

/// Single-layer GRU returning every hidden state.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        Gru {
            input: Linear::new(
                store,
                &format!("{name}.input"),
                in_dim,
                3 * hidden_dim,
                true,
                rng,
            ),
            hidden: Linear::new(
                store,
                &format!("{name}.hidden"),
                hidden_dim,
                3 * hidden_dim,
                true,
                rng,
            ),
            hidden_dim,
        }
    }

    /// `J × in_dim` → `J × hidden_dim`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let steps = g.value(x).rows();
        let hd = self.hidden_dim;
        let xw = self.input.forward(g, x);
        let mut h = g.constant(Tensor::zeros(1, hd));
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice_rows(xw, t, 1);
            let hw = self.hidden.forward(g, h);
            let (xz, hz) = (g.slice_cols(xt, 0, hd), g.slice_cols(hw, 0, hd));
            let (xr, hr) = (g.slice_cols(xt, hd, hd), g.slice_cols(hw, hd, hd));
            let (xn, hn) = (g.slice_cols(xt, 2 * hd, hd), g.slice_cols(hw, 2 * hd, hd));
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let rn = g.mul(r, hn);
            let n = g.add(xn, rn);
            let n = g.tanh(n);
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let d = g.sub(h, n);
            let zd = g.mul(z, d);
            h = g.add(n, zd);
            outs.push(h);
        }
        g.concat_rows(&outs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Elu => g.elu(x),
        }
    }
}

/// Stack of fully-connected layers with an activation between layers and a
/// linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i < last {
                x = self.activation.apply(g, x);
            }
        }
        x
    }
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoid_table(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Shared, cheaply clonable validity mask.
pub fn full_mask(len: usize) -> Arc<Vec<bool>> {
    Arc::new(vec![true; len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, random_projection_loss, worst};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_and_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let x = store.add("x.in", Tensor::randn(6, 3, 1.0, &mut rng));
        let conv = Conv2d::new(&mut store, "c2", 1, 2, (3, 3), (2, 1), (1, 1), &mut rng);
        let gru = Gru::new(&mut store, "gru", 6, 4, &mut rng);
        let conv1 = Conv1d::new(&mut store, "c1", 4, 3, 3, &mut rng);
        let reports = check_params(&store, 1e-5, |g| {
            let xv = g.param(x);
            let flat = g.reshape(xv, 18, 1);
            let (y, (h, w)) = conv.forward(g, flat, 6, 3);
            let y = g.tanh(y);
            let seq = g.reshape(y, h, w * 2);
            let s = gru.forward(g, seq);
            let c = conv1.forward(g, s);
            random_projection_loss(g, c, 1)
        });
        let (name, err) = worst(&reports).unwrap();
        assert!(err < 1e-6, "{name}: {err}");
    }

    #[test]
    fn sinusoid_first_row() {
        let t = sinusoid_table(2, 4);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
    }
}
