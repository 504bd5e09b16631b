//! Reference-driven style extraction: a global timbre vector and a
//! phoneme-aligned emotion sequence, fused into the phoneme encodings.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    AttentionOutput, Conv1d, Conv2d, Gru, LayerNorm, Linear, MultiHeadAttention, StyleTokenLayer,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleDims {
    /// Width of reference features and of the emotion alignment space.
    pub d_ref: usize,
    /// Output channels of each strided 2-D convolution.
    pub ref_channels: Vec<usize>,
    /// Time stride of each convolution; frequency stride is always 2.
    pub ref_time_strides: Vec<usize>,
    pub timbre_tokens: usize,
    pub emotion_tokens: usize,
    pub token_heads: usize,
    pub align_heads: usize,
    pub pepa_kernel: usize,
    pub pooling_heads: usize,
    pub pooling_dim: usize,
    pub pooling_radius: usize,
}

impl Default for StyleDims {
    fn default() -> Self {
        StyleDims {
            d_ref: 128,
            ref_channels: vec![32, 32, 64, 64, 128, 128],
            ref_time_strides: vec![2; 6],
            timbre_tokens: 10,
            emotion_tokens: 10,
            token_heads: 4,
            align_heads: 4,
            pepa_kernel: 3,
            pooling_heads: 4,
            pooling_dim: 128,
            pooling_radius: 1,
        }
    }
}

impl StyleDims {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        let bad = |f: &str, r: String| Err(Error::invalid(format!("style.{f}"), r));
        if self.ref_channels.is_empty() || self.ref_channels.contains(&0) {
            return bad(
                "ref_channels",
                "need at least one non-empty convolution".into(),
            );
        }
        if self.ref_time_strides.len() != self.ref_channels.len()
            || self.ref_time_strides.contains(&0)
        {
            return bad(
                "ref_time_strides",
                format!("need {} positive strides", self.ref_channels.len()),
            );
        }
        if self.timbre_tokens == 0 || self.emotion_tokens == 0 {
            return bad("timbre_tokens", "token banks must be non-empty".into());
        }
        for (f, heads, width) in [
            ("token_heads", self.token_heads, d_model),
            ("align_heads", self.align_heads, self.d_ref),
            ("pooling_heads", self.pooling_heads, d_model),
        ] {
            if heads == 0 || width % heads != 0 {
                return bad(
                    f,
                    format!("width {width} is not divisible by {heads} heads"),
                );
            }
        }
        if self.d_ref == 0 || self.pooling_dim == 0 || self.pepa_kernel == 0 {
            return bad("d_ref", "widths must be ≥ 1".into());
        }
        Ok(())
    }

    /// Reference feature count for a `frames`-long mel.
    pub fn reference_length(&self, frames: usize) -> usize {
        self.ref_time_strides
            .iter()
            .fold(frames, |h, &s| (h + 2 - 3) / s + 1)
    }
}

/// Strided convolutions with per-position layer norm and ReLU, then a GRU
/// over the downsampled time axis.
#[derive(Clone, Debug)]
pub struct ReferenceEncoder {
    pub convs: Vec<Conv2d>,
    pub norms: Vec<LayerNorm>,
    pub gru: Gru,
}

impl ReferenceEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: &StyleDims,
        n_mels: usize,
        rng: &mut R,
    ) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let (mut in_ch, mut width) = (1, n_mels);
        for (i, (&ch, &st)) in dims
            .ref_channels
            .iter()
            .zip(&dims.ref_time_strides)
            .enumerate()
        {
            let name = format!("style_encoder.reference_encoder.conv{i}");
            convs.push(Conv2d::new(
                store,
                &name,
                in_ch,
                ch,
                (3, 3),
                (st, 2),
                (1, 1),
                rng,
            ));
            norms.push(LayerNorm::new(
                store,
                &format!("style_encoder.reference_encoder.norm{i}"),
                ch,
            ));
            in_ch = ch;
            width = (width + 2 - 3) / 2 + 1;
        }
        let gru = Gru::new(
            store,
            "style_encoder.reference_encoder.gru",
            width * in_ch,
            dims.d_ref,
            rng,
        );
        ReferenceEncoder { convs, norms, gru }
    }

    /// `T × M` mel → `J × d_ref` features.
    pub fn forward(&self, g: &mut Graph, mel: &Tensor) -> Result<Var> {
        if mel.rows() == 0 || !mel.is_finite() {
            return Err(Error::invalid(
                "reference mel",
                "must be finite with at least one frame",
            ));
        }
        let (mut h, mut w) = mel.shape();
        let mut x = g.constant(mel.clone().reshape(h * w, 1));
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let (y, (ho, wo)) = conv.forward(g, x, h, w);
            let y = norm.forward(g, y);
            x = g.relu(y);
            (h, w) = (ho, wo);
        }
        let c = g.value(x).cols();
        let seq = g.reshape(x, h, w * c);
        Ok(self.gru.forward(g, seq))
    }
}

/// Self-attentive pooling restricted to a window of `radius` neighbours.
/// Each head scores every row with `vᵀ tanh(W x)` and averages its own
/// column slice of the rows in the window.
#[derive(Clone, Debug)]
pub struct WindowedPooling {
    pub proj: Linear,
    pub score: ParamId,
    pub heads: usize,
    pub radius: usize,
}

pub struct PoolingOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl WindowedPooling {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        heads: usize,
        radius: usize,
        rng: &mut R,
    ) -> Self {
        WindowedPooling {
            proj: Linear::new(store, &format!("{name}.proj"), dim, hidden, true, rng),
            score: store.add_glorot(format!("{name}.score"), hidden, heads, rng),
            heads,
            radius,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> PoolingOutput {
        let (n, d) = g.value(x).shape();
        let hd = d / self.heads;
        let p = self.proj.forward(g, x);
        let p = g.tanh(p);
        let v = g.param(self.score);
        let scores = g.matmul(p, v);
        let scores_t = g.transpose(scores);
        let window: Vec<bool> = (0..n * n)
            .map(|k| (k / n).abs_diff(k % n) <= self.radius)
            .collect();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let row = g.slice_rows(scores_t, h, 1);
            let grid = g.gather_rows(row, vec![0; n]);
            let w = g.softmax_rows(grid, Some(&window));
            let xh = if self.heads == 1 {
                x
            } else {
                g.slice_cols(x, h * hd, hd)
            };
            outs.push(g.matmul(w, xh));
            weights.push(w);
        }
        let out = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        PoolingOutput { out, weights }
    }
}

/// Style representations of one (reference, text) pair.
pub struct StyleBundle {
    /// `1 × D`.
    pub timbre: Var,
    /// `N × D`.
    pub emotion: Var,
    pub emotion_smooth: Var,
    /// `1 × D`, the mean of `emotion`.
    pub emotion_global: Var,
    pub ref_features: Var,
    pub timbre_weights: Vec<Var>,
    pub align_weights: Vec<Var>,
    pub emotion_token_weights: Vec<Var>,
    pub pooling_weights: Vec<Var>,
}

impl StyleBundle {
    pub fn attention_weights(&self) -> impl Iterator<Item = &Var> {
        self.timbre_weights
            .iter()
            .chain(&self.align_weights)
            .chain(&self.emotion_token_weights)
            .chain(&self.pooling_weights)
    }
}

#[derive(Clone, Debug)]
pub struct StyleEncoder {
    pub dims: StyleDims,
    pub reference: ReferenceEncoder,
    pub timbre_tokens: StyleTokenLayer,
    pub pepa1: Conv1d,
    pub pepa2: Conv1d,
    pub align: MultiHeadAttention,
    pub emotion_tokens: StyleTokenLayer,
    pub pooling: WindowedPooling,
    pub fusion: LayerNorm,
}

impl StyleEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: StyleDims,
        d_model: usize,
        n_mels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate(d_model)?;
        let d_ref = dims.d_ref;
        Ok(StyleEncoder {
            reference: ReferenceEncoder::new(store, &dims, n_mels, rng),
            timbre_tokens: StyleTokenLayer::new(
                store,
                "style_encoder.timbre_tokens",
                d_ref,
                dims.timbre_tokens,
                d_ref,
                d_model,
                dims.token_heads,
                rng,
            ),
            pepa1: Conv1d::new(
                store,
                "style_encoder.pepa.conv1",
                d_model,
                d_model,
                dims.pepa_kernel,
                rng,
            ),
            pepa2: Conv1d::new(
                store,
                "style_encoder.pepa.conv2",
                d_model,
                d_ref,
                dims.pepa_kernel,
                rng,
            ),
            align: MultiHeadAttention::new(
                store,
                "style_encoder.emotion_align",
                d_ref,
                d_ref,
                d_ref,
                d_ref,
                dims.align_heads,
                rng,
            ),
            emotion_tokens: StyleTokenLayer::new(
                store,
                "style_encoder.emotion_tokens",
                d_ref,
                dims.emotion_tokens,
                d_ref,
                d_model,
                dims.token_heads,
                rng,
            ),
            pooling: WindowedPooling::new(
                store,
                "style_encoder.pooling",
                d_model,
                dims.pooling_dim,
                dims.pooling_heads,
                dims.pooling_radius,
                rng,
            ),
            fusion: LayerNorm::new(store, "style_encoder.fusion", d_model),
            dims,
        })
    }

    pub fn reference_encode(&self, g: &mut Graph, mel: &Tensor) -> Result<Var> {
        self.reference.forward(g, mel)
    }

    /// Attends the timbre token bank with the mean reference feature.
    pub fn extract_timbre(&self, g: &mut Graph, ref_features: Var) -> AttentionOutput {
        let query = g.mean_rows(ref_features);
        self.timbre_tokens.forward(g, query)
    }

    pub fn pepa_project(&self, g: &mut Graph, phoneme_h: Var) -> Var {
        let y = self.pepa1.forward(g, phoneme_h);
        let y = g.relu(y);
        self.pepa2.forward(g, y)
    }

    /// Cross-attention from phoneme queries to reference frames; no
    /// positional encoding on either side.
    pub fn align_emotion(&self, g: &mut Graph, queries: Var, ref_features: Var) -> AttentionOutput {
        self.align.forward(g, queries, ref_features, None)
    }

    pub fn emotion_sequence(&self, g: &mut Graph, p_tilde: Var) -> AttentionOutput {
        self.emotion_tokens.forward(g, p_tilde)
    }

    pub fn smooth_emotion(&self, g: &mut Graph, emotion: Var) -> PoolingOutput {
        self.pooling.forward(g, emotion)
    }

    /// `LayerNorm(h + emotion_smooth + timbre)`, timbre broadcast over rows.
    pub fn fuse(&self, g: &mut Graph, phoneme_h: Var, bundle: &StyleBundle) -> Result<Var> {
        let (hs, es, ts) = (
            g.value(phoneme_h).shape(),
            g.value(bundle.emotion_smooth).shape(),
            g.value(bundle.timbre).shape(),
        );
        if hs != es || ts != (1, hs.1) {
            return Err(Error::shape(
                "fuse_styles",
                format!("phonemes {hs:?}, emotion {es:?}, timbre {ts:?}"),
            ));
        }
        let x = g.add(phoneme_h, bundle.emotion_smooth);
        let x = g.add_row(x, bundle.timbre);
        Ok(self.fusion.forward(g, x))
    }

    /// Full extraction for one reference mel and one `N × D` phoneme
    /// encoding; `N` and the reference length are unrelated.
    pub fn forward(
        &self,
        g: &mut Graph,
        reference: &Tensor,
        phoneme_h: Var,
    ) -> Result<StyleBundle> {
        let ref_features = self.reference_encode(g, reference)?;
        let timbre = self.extract_timbre(g, ref_features);
        let queries = self.pepa_project(g, phoneme_h);
        let aligned = self.align_emotion(g, queries, ref_features);
        let emotion = self.emotion_sequence(g, aligned.out);
        let smooth = self.smooth_emotion(g, emotion.out);
        let emotion_global = g.mean_rows(emotion.out);
        Ok(StyleBundle {
            timbre: timbre.out,
            emotion: emotion.out,
            emotion_smooth: smooth.out,
            emotion_global,
            ref_features,
            timbre_weights: timbre.weights,
            align_weights: aligned.weights,
            emotion_token_weights: emotion.weights,
            pooling_weights: smooth.weights,
        })
    }
}

/// Mean over rows where `mask` is set.
pub fn pool_global_emotion(g: &mut Graph, emotion: Var, mask: &[bool]) -> Result<Var> {
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::invalid("emotion sequence", "every row is masked"));
    }
    if mask.len() != g.value(emotion).rows() {
        return Err(Error::shape(
            "pool_global_emotion",
            "mask length differs from row count",
        ));
    }
    let rows = g.gather_rows(emotion, idx);
    Ok(g.mean_rows(rows))
}

/// Convenience mask for full sequences.
pub fn all_rows(n: usize) -> Arc<Vec<bool>> {
    Arc::new(vec![true; n])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_params_matching, random_projection_loss, worst};

    fn tiny_dims() -> StyleDims {
        StyleDims {
            d_ref: 4,
            ref_channels: vec![2, 3],
            ref_time_strides: vec![2, 2],
            timbre_tokens: 3,
            emotion_tokens: 3,
            token_heads: 2,
            align_heads: 2,
            pepa_kernel: 3,
            pooling_heads: 2,
            pooling_dim: 3,
            pooling_radius: 1,
        }
    }

    fn tiny(seed: u64) -> (ParamStore, StyleEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = StyleEncoder::new(&mut store, tiny_dims(), 8, 5, &mut rng).unwrap();
        (store, enc)
    }

    fn check_group(prefix: &str, seed: u64, build: impl Fn(&StyleEncoder, &mut Graph) -> Var) {
        check_selected(prefix, |n| n.starts_with(prefix), seed, build)
    }

    fn check_selected(
        prefix: &str,
        select: impl Fn(&str) -> bool,
        seed: u64,
        build: impl Fn(&StyleEncoder, &mut Graph) -> Var,
    ) {
        let (store, enc) = tiny(seed);
        let reports = check_params_matching(&store, 1e-5, select, |g| {
            let out = build(&enc, g);
            random_projection_loss(g, out, seed)
        });
        assert!(!reports.is_empty(), "no parameters under {prefix}");
        let (name, err) = worst(&reports).unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }

    fn mel(t: usize, seed: u64) -> Tensor {
        Tensor::randn(t, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn reference_length_follows_strides() {
        let mut store = ParamStore::new();
        let dims = StyleDims {
            ref_channels: vec![2; 6],
            ..tiny_dims()
        };
        let dims = StyleDims {
            ref_time_strides: vec![2; 6],
            ..dims
        };
        let enc = StyleEncoder::new(
            &mut store,
            dims.clone(),
            8,
            5,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(dims.reference_length(64), 1);
        let mut g = Graph::new(&store);
        let f = enc.reference_encode(&mut g, &mel(64, 1)).unwrap();
        assert_eq!(g.value(f).shape(), (1, 4));
        for t in [1, 2, 3, 17] {
            let f = enc.reference_encode(&mut g, &mel(t, 2)).unwrap();
            assert_eq!(g.value(f).rows(), dims.reference_length(t));
        }
    }

    #[test]
    fn reference_encoder_is_total_and_pure() {
        let (store, enc) = tiny(1);
        let mut g = Graph::new(&store);
        let z = enc.reference_encode(&mut g, &Tensor::zeros(6, 5)).unwrap();
        assert!(g.value(z).is_finite());
        let a = enc.reference_encode(&mut g, &mel(9, 4)).unwrap();
        let b = enc.reference_encode(&mut g, &mel(9, 4)).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn single_timbre_token_ignores_query() {
        let mut store = ParamStore::new();
        let dims = StyleDims {
            timbre_tokens: 1,
            emotion_tokens: 1,
            ..tiny_dims()
        };
        let enc =
            StyleEncoder::new(&mut store, dims, 8, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new(&store);
        let f1 = enc.reference_encode(&mut g, &mel(7, 1)).unwrap();
        let f2 = enc.reference_encode(&mut g, &mel(12, 2)).unwrap();
        let a = enc.extract_timbre(&mut g, f1).out;
        let b = enc.extract_timbre(&mut g, f2).out;
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
        // the emotion bank with one token gives the same row everywhere
        let q = g.constant(Tensor::randn(4, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
        let e = enc.emotion_sequence(&mut g, q).out;
        let e = g.value(e);
        for r in 1..4 {
            for c in 0..8 {
                assert!((e.get(r, c) - e.get(0, c)).abs() < 1e-12);
            }
        }
    }

    /// One head, two tokens with tanh-bank rows `k0`, `k1`; the query is
    /// chosen so the scaled logits are `(0, ln 3)`.
    #[test]
    fn two_token_softmax_arithmetic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = StyleTokenLayer::new(&mut store, "t", 1, 2, 1, 1, 1, &mut rng);
        let att = &layer.attention;
        let set = |s: &mut ParamStore, id, v: f64| *s.get_mut(id) = Tensor::scalar(v);
        // tokens chosen so tanh gives 0 and 0.5
        *store.get_mut(layer.tokens) = Tensor::from_vec(2, 1, vec![0.0, 0.5f64.atanh()]);
        for lin in [&att.query, &att.key, &att.value, &att.output] {
            set(&mut store, lin.weight, 1.0);
            set(&mut store, lin.bias.unwrap(), 0.0);
        }
        // logits q·k = (0, 0.5 q) with unit head scale
        let q = 2.0 * 3f64.ln();
        let mut g = Graph::new(&store);
        let qv = g.constant(Tensor::scalar(q));
        let out = layer.forward(&mut g, qv);
        let w = g.value(out.weights[0]).data().to_vec();
        assert!(
            (w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12,
            "{w:?}"
        );
        let expected = 0.25 * 0.0 + 0.75 * 0.5;
        assert!((g.value(out.out).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn align_emotion_examples() {
        let (store, enc) = tiny(2);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::randn(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let one = g.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.9, 0.1]]));
        let out = enc.align_emotion(&mut g, q, one).out;
        let value_only = {
            let v = enc.align.value.forward(&mut g, one);
            enc.align.output.forward(&mut g, v)
        };
        for r in 0..3 {
            for c in 0..4 {
                assert!((g.value(out).get(r, c) - g.value(value_only).data()[c]).abs() < 1e-12);
            }
        }
        let same = g.constant(Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9, 0.1]; 5]));
        let out2 = enc.align_emotion(&mut g, q, same).out;
        assert!(g.value(out).max_abs_diff(g.value(out2)) < 1e-12);
    }

    /// N=2, J=2, one head, 2-dim identity projections: α and p̃ against a
    /// scalar softmax.
    #[test]
    fn align_emotion_scalar_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let att = MultiHeadAttention::new(&mut store, "a", 2, 2, 2, 2, 1, &mut rng);
        for lin in [&att.query, &att.key, &att.value, &att.output] {
            *store.get_mut(lin.weight) = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
            *store.get_mut(lin.bias.unwrap()) = Tensor::zeros(1, 2);
        }
        let q = [[1.0, 0.5], [-0.3, 2.0]];
        let e = [[0.2, -1.0], [1.5, 0.4]];
        let mut g = Graph::new(&store);
        let qv = g.constant(Tensor::from_rows(&q.map(|r| r.to_vec())));
        let ev = g.constant(Tensor::from_rows(&e.map(|r| r.to_vec())));
        let out = att.forward(&mut g, qv, ev, None);
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (q[i][0] * e[j][0] + q[i][1] * e[j][1]) / 2f64.sqrt())
                .collect();
            let z = s[0].exp() + s[1].exp();
            let alpha = [s[0].exp() / z, s[1].exp() / z];
            for j in 0..2 {
                assert!((g.value(out.weights[0]).get(i, j) - alpha[j]).abs() < 1e-12);
            }
            for c in 0..2 {
                let p = alpha[0] * e[0][c] + alpha[1] * e[1][c];
                assert!((g.value(out.out).get(i, c) - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn emotion_rows_are_independent() {
        let (store, enc) = tiny(3);
        let mut g = Graph::new(&store);
        let mut p = Tensor::randn(4, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let a = g.constant(p.clone());
        let ea = enc.emotion_sequence(&mut g, a).out;
        p.row_mut(0).iter_mut().for_each(|v| *v += 1.0);
        let b = g.constant(p);
        let eb = enc.emotion_sequence(&mut g, b).out;
        assert_ne!(g.value(ea).row(0), g.value(eb).row(0));
        for r in 1..4 {
            assert_eq!(g.value(ea).row(r), g.value(eb).row(r));
        }
    }

    #[test]
    fn pooling_examples() {
        let (store, enc) = tiny(4);
        let mut g = Graph::new(&store);
        let one = g.constant(Tensor::randn(1, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let o = enc.smooth_emotion(&mut g, one).out;
        assert!(g.value(o).max_abs_diff(g.value(one)) < 1e-12);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let same = g.constant(Tensor::from_rows(&vec![row; 4]));
        let o = enc.smooth_emotion(&mut g, same).out;
        assert!(g.value(o).max_abs_diff(g.value(same)) < 1e-12);
    }

    /// Every head's output row is a convex combination of the window rows:
    /// recover the weights from the attention matrix, check they lie on the
    /// simplex with no mass outside the window, and rebuild the output.
    #[test]
    fn pooling_rows_in_window_hull() {
        let (store, enc) = tiny(5);
        let mut g = Graph::new(&store);
        let x = Tensor::randn(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let xv = g.constant(x.clone());
        let o = enc.smooth_emotion(&mut g, xv);
        let hd = 8 / enc.dims.pooling_heads;
        for (h, w) in o.weights.iter().enumerate() {
            let w = g.value(*w);
            for i in 0..5 {
                let row = w.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (j, &a) in row.iter().enumerate() {
                    assert!(a >= 0.0);
                    if i.abs_diff(j) > 1 {
                        assert_eq!(a, 0.0);
                    }
                }
                for c in 0..hd {
                    let rebuilt: f64 = (0..5).map(|j| row[j] * x.get(j, h * hd + c)).sum();
                    assert!((g.value(o.out).get(i, h * hd + c) - rebuilt).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fuse_examples() {
        let (store, enc) = tiny(6);
        let mut g = Graph::new(&store);
        let mk = |g: &mut Graph, t: Tensor| g.constant(t);
        let zeros = |g: &mut Graph, r, c| mk(g, Tensor::zeros(r, c));
        let (h, e, t) = (
            zeros(&mut g, 2, 8),
            zeros(&mut g, 2, 8),
            zeros(&mut g, 1, 8),
        );
        let b = bundle(e, t);
        let y = enc.fuse(&mut g, h, &b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hv = Tensor::randn(2, 8, 1.0, &mut rng);
        let ev = Tensor::randn(2, 8, 1.0, &mut rng);
        let tv = Tensor::randn(1, 8, 1.0, &mut rng);
        let (h, e, t) = (
            mk(&mut g, hv.clone()),
            mk(&mut g, ev.clone()),
            mk(&mut g, tv.clone()),
        );
        let b = bundle(e, t);
        let y = enc.fuse(&mut g, h, &b).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let bad = mk(&mut g, Tensor::zeros(3, 8));
        let b = bundle(bad, t);
        assert!(enc.fuse(&mut g, h, &b).is_err());

        // 2×4 hand example with a non-trivial affine
        let mut store2 = ParamStore::new();
        let ln = LayerNorm::new(&mut store2, "style_encoder.fusion", 4);
        *store2.get_mut(ln.gamma) = Tensor::row_vector(vec![1.0, 2.0, 0.5, -1.0]);
        *store2.get_mut(ln.beta) = Tensor::row_vector(vec![0.0, 0.1, 0.2, 0.3]);
        let enc2 = StyleEncoder {
            fusion: ln,
            ..enc.clone()
        };
        let mut g = Graph::new(&store2);
        let rows = [[1.0, 2.0, 3.0, 4.0], [0.0, -1.0, 0.5, 2.0]];
        let h = g.constant(Tensor::from_rows(&rows.map(|r| r.to_vec())));
        let e = g.constant(Tensor::zeros(2, 4));
        let t = g.constant(Tensor::row_vector(vec![0.5, 0.0, 0.0, -0.5]));
        let b = bundle(e, t);
        let y = enc2.fuse(&mut g, h, &b).unwrap();
        let gamma = [1.0, 2.0, 0.5, -1.0];
        let beta = [0.0, 0.1, 0.2, 0.3];
        let tim = [0.5, 0.0, 0.0, -0.5];
        for r in 0..2 {
            let x: Vec<f64> = (0..4).map(|c| rows[r][c] + tim[c]).collect();
            let m = x.iter().sum::<f64>() / 4.0;
            let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            for c in 0..4 {
                let want = (x[c] - m) / (v + 1e-5).sqrt() * gamma[c] + beta[c];
                assert!((g.value(y).get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    fn bundle(emotion: Var, timbre: Var) -> StyleBundle {
        StyleBundle {
            timbre,
            emotion,
            emotion_smooth: emotion,
            emotion_global: timbre,
            ref_features: timbre,
            timbre_weights: vec![],
            align_weights: vec![],
            emotion_token_weights: vec![],
            pooling_weights: vec![],
        }
    }

    #[test]
    fn global_pooling_examples() {
        let mut g = Graph::detached();
        let v = vec![0.5, -1.0, 2.0];
        let one = g.constant(Tensor::row_vector(v.clone()));
        let p = pool_global_emotion(&mut g, one, &[true]).unwrap();
        assert_eq!(g.value(p).data(), &v[..]);
        let pm = g.constant(Tensor::from_rows(&[
            v.clone(),
            v.iter().map(|x| -x).collect(),
        ]));
        let p = pool_global_emotion(&mut g, pm, &[true, true]).unwrap();
        assert!(g.value(p).data().iter().all(|&x| x == 0.0));
        let padded = g.constant(Tensor::from_rows(&[v.clone(), vec![9.0; 3]]));
        let p = pool_global_emotion(&mut g, padded, &[true, false]).unwrap();
        assert_eq!(g.value(p).data(), &v[..]);
        assert!(pool_global_emotion(&mut g, padded, &[false, false]).is_err());
    }

    #[test]
    fn pepa_gradient_stops_at_frozen_encoder() {
        use crate::backbone::{Backbone, BackboneDims, VarianceRanges};
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = BackboneDims {
            vocab_size: 5,
            n_mels: 5,
            d_model: 8,
            heads: 2,
            ffn_dim: 4,
            ffn_kernel: 3,
            encoder_layers: 1,
            decoder_layers: 1,
            predictor_filters: 4,
            predictor_kernel: 3,
            n_bins: 4,
            dropout: 0.0,
        };
        let bb = Backbone::new(&mut store, dims, VarianceRanges::default(), &mut rng).unwrap();
        let enc = StyleEncoder::new(&mut store, tiny_dims(), 8, 5, &mut rng).unwrap();
        store.set_frozen_prefix("encoder", true);
        let mut g = Graph::new(&store);
        let h = bb.encode(&mut g, &[1, 2, 3]).unwrap();
        let q = enc.pepa_project(&mut g, h);
        assert_eq!(g.value(q).shape(), (3, 4));
        let l = random_projection_loss(&mut g, q, 1);
        let grads = g.backward(&[(l, Tensor::scalar(1.0))]);
        for id in store.ids_with_prefix("encoder") {
            assert!(grads
                .param(id)
                .is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        }
        let pepa: Vec<_> = store.ids_with_prefix("style_encoder.pepa").collect();
        assert!(pepa
            .iter()
            .all(|&id| grads.param(id).is_some_and(|t| t.norm() > 0.0)));
    }

    #[test]
    fn reference_encoder_gradients() {
        let m = mel(6, 3);
        check_group("style_encoder.reference_encoder", 11, |enc, g| {
            enc.reference_encode(g, &m).unwrap()
        });
    }

    #[test]
    fn pepa_gradients() {
        let x = Tensor::randn(3, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        check_group("style_encoder.pepa", 12, |enc, g| {
            let h = g.constant(x.clone());
            enc.pepa_project(g, h)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::randn(3, 4, 1.0, &mut rng);
        let r = Tensor::randn(2, 4, 1.0, &mut rng);
        check_group("style_encoder.emotion_align", 13, |enc, g| {
            let (qv, rv) = (g.constant(q.clone()), g.constant(r.clone()));
            enc.align_emotion(g, qv, rv).out
        });
        check_group("style_encoder.emotion_tokens", 14, |enc, g| {
            let qv = g.constant(q.clone());
            enc.emotion_sequence(g, qv).out
        });
        check_group("style_encoder.timbre_tokens", 15, |enc, g| {
            let rv = g.constant(r.clone());
            enc.extract_timbre(g, rv).out
        });
    }

    #[test]
    fn pooling_and_fusion_gradients() {
        let x = Tensor::randn(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        check_group("style_encoder.pooling", 16, |enc, g| {
            let xv = g.constant(x.clone());
            enc.smooth_emotion(g, xv).out
        });
        // end to end; pooling is skipped here because the near-uniform token
        // mixtures leave it with gradients of order 1e-7, inside the
        // finite-difference noise, and it is checked on its own above
        let m = mel(5, 9);
        let not_pooling = |n: &str| n.starts_with("style_encoder") && !n.contains(".pooling.");
        check_selected("style_encoder", not_pooling, 17, |enc, g| {
            let h = g.constant(x.clone());
            let b = enc.forward(g, &m, h).unwrap();
            let fused = enc.fuse(g, h, &b).unwrap();
            let glob = g.gather_rows(b.emotion_global, vec![0; 5]);
            let tim = g.gather_rows(b.timbre, vec![0; 5]);
            let both = g.add(glob, tim);
            g.add(fused, both)
        });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn shapes_and_simplex_weights(n in 1usize..10, t in 1usize..40, seed in 0u64..1000) {
            let (store, enc) = tiny(21);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new(&store);
            let h = g.constant(Tensor::randn(n, 8, 1.0, &mut rng));
            let reference = Tensor::randn(t, 5, rng.random_range(0.1..3.0), &mut rng);
            let b = enc.forward(&mut g, &reference, h).unwrap();
            prop_assert_eq!(g.value(b.emotion).shape(), (n, 8));
            prop_assert_eq!(g.value(b.emotion_smooth).shape(), (n, 8));
            prop_assert_eq!(g.value(b.timbre).shape(), (1, 8));
            prop_assert_eq!(g.value(b.emotion_global).shape(), (1, 8));
            for w in b.attention_weights() {
                for row in g.value(*w).iter_rows() {
                    prop_assert!(row.iter().all(|&a| a >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn single_head_alignment_ignores_frame_order(seed in 0u64..500) {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let att = MultiHeadAttention::new(&mut store, "a", 4, 4, 4, 4, 1, &mut rng);
            let j = rng.random_range(2..7);
            let q = Tensor::randn(3, 4, 1.0, &mut rng);
            let e = Tensor::randn(j, 4, 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..j).collect();
            perm.rotate_left(1);
            let mut g = Graph::new(&store);
            let qv = g.constant(q);
            let ev = g.constant(e.clone());
            let pv = g.constant(e.select_rows(&perm));
            let a = att.forward(&mut g, qv, ev, None).out;
            let b = att.forward(&mut g, qv, pv, None).out;
            prop_assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
        }
    }
}
