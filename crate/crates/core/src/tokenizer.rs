//! 1D ViT autoencoder: patches plus learnable query tokens in, an ordered
//! sequence of latent tokens out, and a mask-token decoder back to pixels.

use jointok_autograd::{ConvSpec, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{additive_mask, patchify_tensor, unpatchify_tensor, Ctx, Init, LayerNorm, Linear, Mlp, VitBlock};

/// Images `[B, H, W, C]` in [-1, 1] with class labels; `num_classes` is the null class.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    pub pixels: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(pixels: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if pixels.rank() != 4 {
            return Err(Error::DimensionMismatch(format!("images must be [B, H, W, C], got {:?}", pixels.shape())));
        }
        if labels.len() != pixels.dim(0) {
            return Err(Error::DimensionMismatch(format!("{} labels for {} images", labels.len(), pixels.dim(0))));
        }
        if pixels.data().iter().any(|v| !(v.as_f64() >= -1.0 && v.as_f64() <= 1.0)) {
            return Err(Error::OutOfRange { what: "pixel value", detail: "pixels must lie in [-1, 1]".into() });
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSide {
    /// token order `[patches, queries]`
    Encoder,
    /// token order `[queries, patches]`
    Decoder,
}

/// Boolean attention pattern; `allow[r * size + c]` lets token `r` attend token `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HybridMask {
    pub size: usize,
    pub allow: Vec<bool>,
}

impl HybridMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.size + col]
    }

    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        additive_mask(&self.allow, self.size)
    }
}

/// Bidirectional among patches, causal among queries.
///
/// Encoder: patches see only patches; query `i` sees every patch and queries `j <= i`.
/// Decoder: query `i` sees queries `j <= i`; patches see every query and every patch.
pub fn build_hybrid_mask(n: usize, l: usize, side: MaskSide) -> Result<HybridMask> {
    if n == 0 || l == 0 {
        return Err(Error::OutOfRange { what: "mask size", detail: format!("N={n}, L={l} must be positive") });
    }
    let size = n + l;
    let mut allow = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            allow[r * size + c] = match side {
                MaskSide::Encoder => {
                    if r < n {
                        c < n
                    } else {
                        c < n || c <= r
                    }
                }
                MaskSide::Decoder => {
                    if r < l {
                        c <= r
                    } else {
                        true
                    }
                }
            };
        }
    }
    Ok(HybridMask { size, allow })
}

/// Architecture of the autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub mlp_ratio: usize,
    pub latent_dim: usize,
    pub num_tokens: usize,
    /// width of substituted features, when direct substitution is enabled
    pub substitution_dim: Option<usize>,
}

impl TokenizerConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Outputs of the encoder.
pub struct EncoderOutput<'g, T: Scalar> {
    /// hidden patch embeddings `[B, N, D]`
    pub h_enc: Var<'g, T>,
    /// latent tokens `[B, L, d]`
    pub z: Var<'g, T>,
}

pub struct DecoderOutput<'g, T: Scalar> {
    /// reconstruction `[B, H, W, C]` in [-1, 1]
    pub pixels: Var<'g, T>,
    /// mask-token states `[B, N, D]` after the requested block, if any
    pub h_dec: Option<Var<'g, T>>,
}

/// Parameter handles of the autoencoder; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    patch_embed: Linear,
    enc_pos_patch: ParamId,
    enc_pos_query: ParamId,
    queries: ParamId,
    enc_blocks: Vec<VitBlock>,
    enc_norm: LayerNorm,
    to_latent: Linear,
    substitution: Option<Mlp>,
    from_latent: Linear,
    mask_token: ParamId,
    dec_pos_patch: ParamId,
    dec_pos_query: ParamId,
    dec_blocks: Vec<VitBlock>,
    dec_norm: LayerNorm,
    to_pixels: Linear,
    out_conv_w: ParamId,
    out_conv_b: ParamId,
}

impl Tokenizer {
    /// Registers encoder parameters under `enc.` and decoder parameters under `dec.`.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: TokenizerConfig) -> Self {
        let (n, l, d) = (cfg.num_patches(), cfg.num_tokens, cfg.width);
        let mut e = init.scope("enc");
        let patch_embed = e.linear("patch_embed", cfg.patch_dim(), d);
        let enc_pos_patch = e.normal("pos_patch", &[n, d], 0.02);
        let enc_pos_query = e.normal("pos_query", &[l, d], 0.02);
        let queries = e.normal("queries", &[l, d], 0.02);
        let enc_blocks =
            (0..cfg.enc_layers).map(|i| VitBlock::new(&mut e.scope(&format!("block{i}")), d, cfg.heads, cfg.mlp_ratio)).collect();
        let enc_norm = e.layer_norm("norm", d);
        let to_latent = e.linear("to_latent", d, cfg.latent_dim);
        let substitution = cfg.substitution_dim.map(|df| Mlp::new(&mut e.scope("substitution"), &[df, d.max(df), d]));
        drop(e);

        let mut dd = init.scope("dec");
        let from_latent = dd.linear("from_latent", cfg.latent_dim, d);
        let mask_token = dd.normal("mask_token", &[d], 0.02);
        let dec_pos_patch = dd.normal("pos_patch", &[n, d], 0.02);
        let dec_pos_query = dd.normal("pos_query", &[l, d], 0.02);
        let dec_blocks =
            (0..cfg.dec_layers).map(|i| VitBlock::new(&mut dd.scope(&format!("block{i}")), d, cfg.heads, cfg.mlp_ratio)).collect();
        let dec_norm = dd.layer_norm("norm", d);
        let to_pixels = dd.linear("to_pixels", d, cfg.patch_dim());
        // 3x3 output convolution starting at the identity plus a small perturbation
        let c = cfg.channels;
        let mut w = Tensor::<T>::randn(vec![9 * c, c], 0.01, dd.rng());
        for ch in 0..c {
            w.data_mut()[(4 * c + ch) * c + ch] += T::one();
        }
        let out_conv_w = dd.tensor("out_conv.w", w);
        let out_conv_b = dd.zeros("out_conv.b", &[c]);
        Self {
            cfg,
            patch_embed,
            enc_pos_patch,
            enc_pos_query,
            queries,
            enc_blocks,
            enc_norm,
            to_latent,
            substitution,
            from_latent,
            mask_token,
            dec_pos_patch,
            dec_pos_query,
            dec_blocks,
            dec_norm,
            to_pixels,
            out_conv_w,
            out_conv_b,
        }
    }

    pub fn to_latent_ids(&self) -> (ParamId, Option<ParamId>) {
        (self.to_latent.w, self.to_latent.b)
    }

    fn check_image<T: Scalar>(&self, x: &Var<'_, T>) -> Result<(usize, usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::DimensionMismatch(format!("images must be [B, H, W, C], got {s:?}")));
        }
        let p = self.cfg.patch_size;
        if s[1] % p != 0 || s[2] % p != 0 {
            return Err(Error::DimensionMismatch(format!("image {}x{} not divisible by patch size {p}", s[1], s[2])));
        }
        if s[1] != self.cfg.image_size || s[2] != self.cfg.image_size || s[3] != self.cfg.channels {
            return Err(Error::DimensionMismatch(format!(
                "model expects {0}x{0}x{1} images, got {2}x{3}x{4}",
                self.cfg.image_size, self.cfg.channels, s[1], s[2], s[3]
            )));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// Patch tokens `[B, N, D]`: linear embedding of each P×P×C patch plus a positional embedding.
    pub fn patchify<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, images: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_image(&images)?;
        let patches = patchify_tensor(images, self.cfg.patch_size);
        Ok(self.patch_embed.forward(cx, patches) + cx.p(self.enc_pos_patch))
    }

    /// Projected frozen features used in place of the pixel patch embedding.
    pub fn substitute_patches<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, features: Var<'g, T>) -> Result<Var<'g, T>> {
        let mlp = self
            .substitution
            .as_ref()
            .ok_or_else(|| Error::ModeMismatch("direct substitution is not enabled for this tokenizer".into()))?;
        let s = features.shape();
        if s.len() != 3 || s[1] != self.cfg.num_patches() || s[2] != mlp.layers[0].fan_in {
            return Err(Error::GridMismatch(format!(
                "substituted features {s:?} do not match [B, {}, {}]",
                self.cfg.num_patches(),
                mlp.layers[0].fan_in
            )));
        }
        Ok(mlp.forward(cx, features))
    }

    /// Runs the encoder on already embedded patch tokens `[B, N, D]`.
    pub fn encode_tokens<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, patches: Var<'g, T>) -> Result<EncoderOutput<'g, T>> {
        let (b, n, d, l) = (patches.dim(0), self.cfg.num_patches(), self.cfg.width, self.cfg.num_tokens);
        if patches.shape() != [b, n, d] {
            return Err(Error::DimensionMismatch(format!("patch tokens {:?} != [B, {n}, {d}]", patches.shape())));
        }
        let q = (cx.p(self.queries) + cx.p(self.enc_pos_query)).broadcast_to(vec![b, l, d]);
        let mut x = cx.g.concat(&[patches, q], 1);
        let mask = cx.g.constant(build_hybrid_mask(n, l, MaskSide::Encoder)?.additive());
        for block in &self.enc_blocks {
            x = block.forward(cx, x, Some(mask));
        }
        let x = self.enc_norm.forward(cx, x);
        let h_enc = x.narrow(1, 0, n);
        let z = self.to_latent.forward(cx, x.narrow(1, n, l));
        Ok(EncoderOutput { h_enc, z })
    }

    /// `[h_enc, z] = E([x_patch, q])`.
    pub fn encode<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, images: Var<'g, T>) -> Result<EncoderOutput<'g, T>> {
        let patches = self.patchify(cx, images)?;
        self.encode_tokens(cx, patches)
    }

    /// Decodes the first `prefix_len` latent tokens; later tokens are dropped
    /// from the sequence. `capture` selects a decoder block (1-based) whose
    /// mask-token states are returned.
    pub fn decode<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, '_, T>,
        z_q: Var<'g, T>,
        prefix_len: usize,
        capture: Option<usize>,
    ) -> Result<DecoderOutput<'g, T>> {
        let l = self.cfg.num_tokens;
        let s = z_q.shape();
        if s.len() != 3 || s[1] != l || s[2] != self.cfg.latent_dim {
            return Err(Error::DimensionMismatch(format!("latents {s:?} != [B, {l}, {}]", self.cfg.latent_dim)));
        }
        if prefix_len == 0 || prefix_len > l {
            return Err(Error::OutOfRange { what: "prefix_len", detail: format!("{prefix_len} not in 1..={l}") });
        }
        if let Some(k) = capture {
            if k == 0 || k > self.dec_blocks.len() {
                return Err(Error::OutOfRange {
                    what: "decoder alignment layer",
                    detail: format!("{k} not in 1..={}", self.dec_blocks.len()),
                });
            }
        }
        let (b, n, d) = (s[0], self.cfg.num_patches(), self.cfg.width);
        let z = if prefix_len < l { z_q.narrow(1, 0, prefix_len) } else { z_q };
        let pos_q = cx.p(self.dec_pos_query);
        let pos_q = if prefix_len < l { pos_q.narrow(0, 0, prefix_len) } else { pos_q };
        let queries = self.from_latent.forward(cx, z) + pos_q;
        let masks = (cx.p(self.mask_token) + cx.p(self.dec_pos_patch)).broadcast_to(vec![b, n, d]);
        let mut x = cx.g.concat(&[queries, masks], 1);
        let mask = cx.g.constant(build_hybrid_mask(n, prefix_len, MaskSide::Decoder)?.additive());
        let mut h_dec = None;
        for (i, block) in self.dec_blocks.iter().enumerate() {
            x = block.forward(cx, x, Some(mask));
            if capture == Some(i + 1) {
                h_dec = Some(x.narrow(1, prefix_len, n));
            }
        }
        let x = self.dec_norm.forward(cx, x).narrow(1, prefix_len, n);
        let patches = self.to_pixels.forward(cx, x);
        let (h, c) = (self.cfg.image_size, self.cfg.channels);
        let img = unpatchify_tensor(patches, self.cfg.patch_size, h, h, c);
        let spec = ConvSpec { kernel: 3, stride: 1, pad: 1 };
        let out = (img.conv2d(cx.p(self.out_conv_w), spec) + cx.p(self.out_conv_b)).tanh();
        Ok(DecoderOutput { pixels: out, h_dec })
    }
}

/// Convenience: encode a batch without tracking gradients.
pub fn encode_inference<T: Scalar>(tok: &Tokenizer, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let cx = Ctx::frozen(&g, store);
    let out = tok.encode(&cx, g.constant(images.clone()))?;
    Ok((*out.z.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> TokenizerConfig {
        TokenizerConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            width: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            mlp_ratio: 2,
            latent_dim: 4,
            num_tokens: 3,
            substitution_dim: None,
        }
    }

    #[test]
    fn mask_examples() {
        let m = build_hybrid_mask(2, 2, MaskSide::Encoder).unwrap();
        let rows: Vec<Vec<u8>> = (0..4).map(|r| (0..4).map(|c| m.get(r, c) as u8).collect()).collect();
        assert_eq!(rows, vec![vec![1, 1, 0, 0], vec![1, 1, 0, 0], vec![1, 1, 1, 0], vec![1, 1, 1, 1]]);
        let d = build_hybrid_mask(1, 1, MaskSide::Decoder).unwrap();
        assert_eq!(d.allow, vec![true, false, true, true]);
        assert!(!build_hybrid_mask(1, 1, MaskSide::Encoder).unwrap().get(0, 1));
        assert!(build_hybrid_mask(0, 1, MaskSide::Encoder).is_err());
    }

    #[test]
    fn patch_counts() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = tiny_cfg();
        cfg.image_size = 32;
        cfg.patch_size = 8;
        let tok = Tokenizer::new(&mut Init::new(&mut store, &mut rng), cfg);
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::zeros(vec![1, 32, 32, 3]));
        assert_eq!(tok.patchify(&cx, x).unwrap().shape(), vec![1, 16, 16]);
        let bad = g.constant(Tensor::zeros(vec![1, 30, 30, 3]));
        assert!(matches!(tok.patchify(&cx, bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn round_trip_shapes_and_prefix_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tok = Tokenizer::new(&mut Init::new(&mut store, &mut rng), tiny_cfg());
        let x = Tensor::uniform(vec![2, 8, 8, 3], -1.0, 1.0, &mut rng);
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let enc = tok.encode(&cx, g.constant(x)).unwrap();
        assert_eq!(enc.z.shape(), vec![2, 3, 4]);
        assert_eq!(enc.h_enc.shape(), vec![2, 4, 16]);
        let full = tok.decode(&cx, enc.z, 3, Some(1)).unwrap();
        assert_eq!(full.pixels.shape(), vec![2, 8, 8, 3]);
        assert_eq!(full.h_dec.unwrap().shape(), vec![2, 4, 16]);
        assert!(full.pixels.value().data().iter().all(|v| v.abs() <= 1.0));
        let again = tok.decode(&cx, enc.z, 3, None).unwrap();
        assert_eq!(*full.pixels.value(), *again.pixels.value());
        assert!(tok.decode(&cx, enc.z, 0, None).is_err());
        assert!(tok.decode(&cx, enc.z, 4, None).is_err());
    }
}
