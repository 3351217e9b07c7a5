//! Layers shared by the tokenizer, generator and the frozen helper networks.
//!
//! Layers hold only [`ParamId`]s; values live in a [`ParamStore`] and are
//! bound to a graph through a [`Ctx`] at forward time.

use jointok_autograd::{ConvSpec, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NORM_EPS: f64 = 1e-6;

/// Registers parameters under a dotted name prefix.
pub struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, T> {
        let prefix = self.name(name);
        Init { store: self.store, rng: self.rng, prefix }
    }

    fn name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let name = self.name(name);
        self.store.add(name, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape.to_vec(), std, self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::ones(shape.to_vec()))
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let mut s = self.scope(name);
        let w = s.normal("w", &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        let b = s.zeros("b", &[fan_out]);
        Linear { w, b: Some(b), fan_in, fan_out }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        let mut s = self.scope(name);
        LayerNorm { gain: s.ones("g", &[dim]), bias: s.zeros("b", &[dim]) }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Conv {
        let mut s = self.scope(name);
        let fan_in = kernel * kernel * cin;
        let w = s.normal("w", &[fan_in, cout], (2.0 / fan_in as f64).sqrt());
        let b = s.zeros("b", &[cout]);
        Conv { w, b, spec: ConvSpec { kernel, stride, pad }, cin, cout }
    }
}

/// Seeded generator for a named component, so frozen helpers get the same
/// weights in every process.
pub fn component_rng(seed: u64, component: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    // decorrelate nearby seeds
    let _: u64 = rng.random();
    rng
}

/// Binds parameters of one store to a graph.
#[derive(Clone, Copy)]
pub struct Ctx<'g, 's, T: Scalar> {
    pub g: &'g Graph<T>,
    pub store: &'s ParamStore<T>,
    pub frozen: bool,
}

impl<'g, 's, T: Scalar> Ctx<'g, 's, T> {
    pub fn new(g: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self { g, store, frozen: false }
    }

    /// Parameters load as constants and receive no gradient.
    pub fn frozen(g: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self { g, store, frozen: true }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        if self.frozen || !self.g.is_tracking() {
            self.g.frozen(self.store, id)
        } else {
            self.g.param(self.store, id)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = x.matmul(cx.p(self.w));
        match self.b {
            Some(b) => y + cx.p(b),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(NORM_EPS) * cx.p(self.gain) + cx.p(self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(cx.p(self.w), self.spec) + cx.p(self.b)
    }
}

/// Stack of linear layers with SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dims: &[usize]) -> Self {
        let layers = dims.windows(2).enumerate().map(|(i, w)| init.linear(&format!("l{i}"), w[0], w[1])).collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, mut x: Var<'g, T>) -> Var<'g, T> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = x.silu();
            }
            x = layer.forward(cx, x);
        }
        x
    }
}

/// Additive attention mask: 0 where attention is allowed, -inf elsewhere.
pub fn additive_mask<T: Scalar>(allow: &[bool], size: usize) -> Tensor<T> {
    assert_eq!(allow.len(), size * size);
    Tensor::from_vec(vec![size, size], allow.iter().map(|&a| if a { T::zero() } else { T::neg_infinity() }).collect())
}

/// Multi-head self-attention with a fused qkv projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "width {dim} not divisible by {heads} heads");
        Self { qkv: init.linear("qkv", dim, 3 * dim), out: init.linear("out", dim, dim), heads, dim }
    }

    /// Splits fused projections `[B, S, 3D]` into q, k, v of shape `[B, H, S, D/H]`.
    pub fn split_heads<'g, T: Scalar>(&self, qkv: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>, Var<'g, T>) {
        let (b, s) = (qkv.dim(0), qkv.dim(1));
        let dh = self.dim / self.heads;
        let t = qkv.reshape(vec![b, s, 3, self.heads, dh]).permute(&[2, 0, 3, 1, 4]);
        let part = |i: usize| t.narrow(0, i, 1).reshape(vec![b, self.heads, s, dh]);
        (part(0), part(1), part(2))
    }

    /// Attention of q over k, v; output merged back to `[B, Sq, D]`.
    pub fn attend<'g, T: Scalar>(
        &self,
        q: Var<'g, T>,
        k: Var<'g, T>,
        v: Var<'g, T>,
        mask: Option<Var<'g, T>>,
    ) -> Var<'g, T> {
        let (b, sq) = (q.dim(0), q.dim(2));
        let dh = self.dim / self.heads;
        let mut scores = q.matmul_t(k).scale(1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = scores + m;
        }
        let att = scores.softmax_last().matmul(v);
        att.permute(&[0, 2, 1, 3]).reshape(vec![b, sq, self.dim])
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, x: Var<'g, T>, mask: Option<Var<'g, T>>) -> Var<'g, T> {
        let (q, k, v) = self.split_heads(self.qkv.forward(cx, x));
        self.out.forward(cx, self.attend(q, k, v, mask))
    }
}

/// Pre-norm transformer block with a GELU MLP.
#[derive(Clone, Debug)]
pub struct VitBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VitBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            norm1: init.layer_norm("norm1", dim),
            attn: Attention::new(&mut init.scope("attn"), dim, heads),
            norm2: init.layer_norm("norm2", dim),
            fc1: init.linear("fc1", dim, hidden),
            fc2: init.linear("fc2", hidden, dim),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, x: Var<'g, T>, mask: Option<Var<'g, T>>) -> Var<'g, T> {
        let x = x + self.attn.forward(cx, self.norm1.forward(cx, x), mask);
        let h = self.fc1.forward(cx, self.norm2.forward(cx, x)).gelu();
        x + self.fc2.forward(cx, h)
    }
}

/// `[B, H, W, C]` to `[B, (H/P)·(W/P), P·P·C]`, row-major over the patch grid.
pub fn patchify_tensor<'g, T: Scalar>(x: Var<'g, T>, p: usize) -> Var<'g, T> {
    let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    x.reshape(vec![b, h / p, p, w / p, p, c]).permute(&[0, 1, 3, 2, 4, 5]).reshape(vec![b, (h / p) * (w / p), p * p * c])
}

/// Inverse of [`patchify_tensor`].
pub fn unpatchify_tensor<'g, T: Scalar>(x: Var<'g, T>, p: usize, h: usize, w: usize, c: usize) -> Var<'g, T> {
    let b = x.dim(0);
    x.reshape(vec![b, h / p, w / p, p, p, c]).permute(&[0, 1, 3, 2, 4, 5]).reshape(vec![b, h, w, c])
}

/// Mean over the spatial axes of an NHWC tensor.
pub fn global_avg_pool<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    x.reshape(vec![b, h * w, c]).mean_axis(1, false)
}

/// Row-wise ℓ2 normalization of the last axis.
pub fn l2_normalize<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    x / x.square().sum_last(true).sqrt()
}

/// Uniform draw in [0, 1).
pub fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(vec![2, 8, 12, 3], 1.0, &mut rng);
        let g = Graph::inference();
        let p = patchify_tensor(g.constant(x.clone()), 4);
        assert_eq!(p.shape(), vec![2, 6, 48]);
        // patch (row 1, col 2) of image 0 starts at pixel (4, 8)
        let first = p.value().data()[(5) * 48];
        assert_eq!(first, x.data()[(4 * 12 + 8) * 3]);
        let back = unpatchify_tensor(p, 4, 8, 12, 3);
        assert_eq!(*back.value(), x);
    }

    #[test]
    fn masked_attention_ignores_disallowed_keys() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = Attention::new(&mut Init::new(&mut store, &mut rng), 8, 2);
        let x = Tensor::randn(vec![1, 3, 8], 1.0, &mut rng);
        let mut y = x.clone();
        // change the last token; under a causal mask the first two outputs are unchanged
        for v in &mut y.data_mut()[16..] {
            *v += 1.0;
        }
        let allow: Vec<bool> = (0..9).map(|i| i % 3 <= i / 3).collect();
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let m = g.constant(additive_mask(&allow, 3));
        let a = attn.forward(&cx, g.constant(x), Some(m)).value();
        let b = attn.forward(&cx, g.constant(y), Some(m)).value();
        assert_eq!(a.data()[..16], b.data()[..16]);
        assert_ne!(a.data()[16..], b.data()[16..]);
    }
}
