//! Layers built from the primitives in [`crate::ops`].
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ParamStore`] and
//! are bound to a graph on use.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x·W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[in_dim, out_dim], bound, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: shape,
                right: vec![self.in_dim, self.out_dim],
            });
        }
        let rows = x.numel() / self.in_dim.max(1);
        let flat = x.reshape(&[rows, self.in_dim])?;
        let y = flat.matmul(g.param(self.weight))?.add(g.param(self.bias))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(&out_shape)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        store.value_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Per-position linear map over the channels of a `[C, H, W]` map.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    /// `[out, in]`
    pub weight: ParamId,
    /// `[out, 1]`, broadcast over positions.
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv1x1 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // He-uniform; most of these feed a ReLU.
        let bound = (6.0 / in_ch.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[out_ch, in_ch], bound, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch, 1]))?;
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, map: Var<'g>) -> Result<Var<'g>> {
        let shape = map.shape();
        if shape.len() != 3 || shape[0] != self.in_ch {
            return Err(Error::ShapeMismatch {
                op: "conv1x1",
                left: shape,
                right: vec![self.out_ch, self.in_ch],
            });
        }
        let (h, w) = (shape[1], shape[2]);
        let flat = map.reshape(&[self.in_ch, h * w])?;
        let y = g
            .param(self.weight)
            .matmul(flat)?
            .add(g.param(self.bias))?;
        y.reshape(&[self.out_ch, h, w])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(g.param(self.gamma), g.param(self.beta), self.eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Feature-wise batch normalization of `[B, F]` inputs with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
    pub features: usize,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[features]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[features]))?,
            running_mean: store.add_buffer(
                format!("{name}.running_mean"),
                Tensor::zeros(&[features]),
            )?,
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::ones(&[features]),
            )?,
            eps: 1e-5,
            momentum: 0.1,
            features,
        })
    }

    /// In training mode normalizes with batch statistics and queues the
    /// running-statistics update on the graph; otherwise uses the running
    /// statistics.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>, mode: Mode) -> Result<Var<'g>> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        match mode {
            Mode::Train => {
                let batch = x.shape().first().copied().unwrap_or(0);
                let (y, mean, var) = x.batch_norm_train(gamma, beta, self.eps)?;
                let store = g.params();
                let unbias = if batch > 1 {
                    batch as f64 / (batch - 1) as f64
                } else {
                    1.0
                };
                let blend = |old: &Tensor, new: &[f64], scale: f64| {
                    let data = old
                        .data()
                        .iter()
                        .zip(new)
                        .map(|(o, n)| (1.0 - self.momentum) * o + self.momentum * n * scale)
                        .collect();
                    Tensor::vector(data)
                };
                g.update_buffer(
                    self.running_mean,
                    blend(store.value(self.running_mean), &mean, 1.0),
                );
                g.update_buffer(
                    self.running_var,
                    blend(store.value(self.running_var), &var, unbias),
                );
                Ok(y)
            }
            Mode::Infer => {
                let store = g.params();
                let mean = store.value(self.running_mean).clone();
                let inv_std = store
                    .value(self.running_var)
                    .map(|v| 1.0 / (v + self.eps).sqrt());
                x.sub(g.input(mean))?
                    .mul(g.input(inv_std))?
                    .mul(gamma)?
                    .add(beta)
            }
        }
    }
}

/// Scaled dot-product attention over `[B, L, D]` token sets with `heads`
/// parallel heads and an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph<'g>,
        q: Var<'g>,
        k: Var<'g>,
        v: Var<'g>,
    ) -> Result<Var<'g>> {
        Ok(self.forward_with_weights(g, q, k, v)?.0)
    }

    /// Also returns the attention weights `[B, heads, Lq, Lk]`.
    pub fn forward_with_weights<'g>(
        &self,
        g: &'g Graph<'g>,
        q: Var<'g>,
        k: Var<'g>,
        v: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let (qs, ks) = (q.shape(), k.shape());
        if qs.len() != 3 || ks.len() != 3 || v.shape() != ks || qs[0] != ks[0] {
            return Err(Error::ShapeMismatch {
                op: "multi_head_attention",
                left: qs,
                right: ks,
            });
        }
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        let dh = self.dim / self.heads;
        let split = |x: Var<'g>, len: usize| -> Result<Var<'g>> {
            x.reshape(&[b, len, self.heads, dh])?.permute(&[0, 2, 1, 3])
        };
        let qh = split(self.q.forward(g, q)?, lq)?;
        let kh = split(self.k.forward(g, k)?, lk)?;
        let vh = split(self.v.forward(g, v)?, lk)?;
        let scores = qh.matmul_t(kh)?.scale(1.0 / (dh as f64).sqrt());
        let weights = scores.softmax(3)?;
        let ctx = weights
            .matmul(vh)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, lq, self.dim])?;
        Ok((self.out.forward(g, ctx)?, weights))
    }
}

/// Two-layer position-wise MLP with a ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.fc1.forward(g, x)?.relu();
        self.fc2.forward(g, h)
    }
}

/// Post-norm transformer encoder layer:
/// `x = LN(x + MHA(x)); x = LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let a = self.attn.forward(g, x, x, x)?;
        let x = self.norm1.forward(g, x.add(a)?)?;
        let f = self.ffn.forward(g, x)?;
        self.norm2.forward(g, x.add(f)?)
    }

    /// Zeroes the attention and feed-forward output projections, leaving a
    /// layer that only normalizes its input.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.attn.out.zero(store);
        self.ffn.fc2.zero(store);
    }
}

/// Pre-norm attention block: `x = x + MHA(LN(x)); x = x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.norm1.forward(g, x)?;
        let x = x.add(self.attn.forward(g, h, h, h)?)?;
        let h = self.norm2.forward(g, x)?;
        x.add(self.ffn.forward(g, h)?)
    }

    /// Zeroed output projections make the block an exact identity.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.attn.out.zero(store);
        self.ffn.fc2.zero(store);
    }
}

/// Fixed 2-D sinusoidal position encoding, `[h*w, dim]` in row-major pixel
/// order. The first half of the channels encodes the row, the second half
/// the column.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; h * w * dim];
    let enc = |pos: usize, i: usize, width: usize| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / width.max(1) as f64);
        let angle = pos as f64 * freq;
        if i.is_multiple_of(2) {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            for i in 0..half {
                row[i] = enc(y, i, half);
            }
            for i in half..dim {
                row[i] = enc(x, i - half, dim - half);
            }
        }
    }
    Tensor::from_parts(vec![h * w, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = MultiHeadAttention::new(&mut store, "a", 10, 4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn conv1x1_identity_leaves_map_unchanged() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1x1::new(&mut store, "c", 3, 3, &mut rng).unwrap();
        let eye = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        *store.value_mut(conv.weight) = eye;
        let map = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let g = Graph::with_params(&store);
        let out = conv.forward(&g, g.input(map.clone())).unwrap();
        assert_eq!(*out.value(), map);
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let q = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let kv = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let g = Graph::with_params(&store);
        let (out, w) = mha
            .forward_with_weights(&g, g.input(q), g.input(kv.clone()), g.input(kv.clone()))
            .unwrap();
        assert!(w.value().data().iter().all(|&x| x == 1.0));
        let expected = mha.out.forward(&g, mha.v.forward(&g, g.input(kv)).unwrap()).unwrap();
        assert!(out.value().max_abs_diff(&expected.value()) < 1e-12);
    }

    #[test]
    fn batch_norm_inference_uses_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm1d::new(&mut store, "bn", 2).unwrap();
        *store.value_mut(bn.running_mean) = Tensor::vector(vec![1.0, -1.0]);
        *store.value_mut(bn.running_var) = Tensor::vector(vec![4.0, 1.0]);
        let g = Graph::with_params(&store);
        let x = g.input(Tensor::from_rows(&[vec![3.0, 0.0]]));
        let y = bn.forward(&g, x, Mode::Infer).unwrap().value();
        approx::assert_abs_diff_eq!(y.data()[0], 2.0 / (4.0f64 + 1e-5).sqrt(), epsilon = 1e-12);
        approx::assert_abs_diff_eq!(y.data()[1], 1.0 / (1.0f64 + 1e-5).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn batch_norm_training_queues_running_update() {
        let mut store = ParamStore::new();
        let bn = BatchNorm1d::new(&mut store, "bn", 1).unwrap();
        let updates = {
            let g = Graph::with_params(&store);
            let x = g.input(Tensor::from_rows(&[vec![1.0], vec![3.0]]));
            let y = bn.forward(&g, x, Mode::Train).unwrap();
            let y = y.value();
            assert!((y.data()[0] + y.data()[1]).abs() < 1e-12);
            g.take_buffer_updates()
        };
        store.apply_buffer_updates(updates);
        approx::assert_abs_diff_eq!(store.value(bn.running_mean).data()[0], 0.2, epsilon = 1e-12);
        // unbiased batch variance is 2
        approx::assert_abs_diff_eq!(store.value(bn.running_var).data()[0], 0.9 + 0.2, epsilon = 1e-12);
    }

    #[test]
    fn sinusoidal_encoding_is_bounded() {
        let pe = sinusoidal_2d(4, 5, 16);
        assert_eq!(pe.shape(), &[20, 16]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        // position (0,0): sin terms 0, cos terms 1
        assert_eq!(&pe.row(0)[..4], &[0.0, 1.0, 0.0, 1.0]);
    }
}
