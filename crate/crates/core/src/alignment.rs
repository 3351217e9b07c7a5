//! Frozen feature providers and the semantic alignment losses.
//!
//! Four encoder-side strategies are supported (none, direct alignment of
//! latent tokens, substitution of patch embeddings, implicit alignment of
//! hidden patch states), plus an independent decoder-side alignment of
//! mask-token states.

use jointok_autograd::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::config::AlignMode;
use crate::error::{Error, Result};
use crate::nn::{component_rng, patchify_tensor, Ctx, Init, LayerNorm, Linear, Mlp, VitBlock};

/// A frozen image feature extractor producing features on a square patch grid.
pub trait FeatureProvider<T: Scalar>: Send + Sync {
    fn id(&self) -> &str;
    /// side length of the square feature grid
    fn grid(&self) -> usize;
    fn dim(&self) -> usize;
    /// `[B, H, W, C]` to `[B, grid², dim]`; deterministic, never trained.
    fn extract(&self, images: &Tensor<T>) -> Result<Tensor<T>>;
}

pub const FROZEN_RANDOM_VIT: &str = "frozen-random-vit";
const PROVIDER_SEED: u64 = 0x5eed_0f_fea7;

/// Small ViT with fixed random weights standing in for a pretrained encoder.
pub struct FrozenRandomVit<T: Scalar> {
    store: ParamStore<T>,
    embed: Linear,
    pos: jointok_autograd::ParamId,
    blocks: Vec<VitBlock>,
    norm: LayerNorm,
    image_size: usize,
    channels: usize,
    patch: usize,
    dim: usize,
}

impl<T: Scalar> FrozenRandomVit<T> {
    pub fn new(image_size: usize, channels: usize, patch: usize, dim: usize) -> Result<Self> {
        if patch == 0 || image_size % patch != 0 {
            return Err(Error::DimensionMismatch(format!("provider patch {patch} does not tile image size {image_size}")));
        }
        let heads = if dim % 4 == 0 { 4 } else { 1 };
        let mut store = ParamStore::new();
        let mut rng = component_rng(PROVIDER_SEED, FROZEN_RANDOM_VIT);
        let mut init = Init::new(&mut store, &mut rng);
        let n = (image_size / patch).pow(2);
        let embed = init.linear("embed", patch * patch * channels, dim);
        let pos = init.normal("pos", &[n, dim], 0.5);
        let blocks = (0..2).map(|i| VitBlock::new(&mut init.scope(&format!("block{i}")), dim, heads, 2)).collect();
        let norm = init.layer_norm("norm", dim);
        Ok(Self { store, embed, pos, blocks, norm, image_size, channels, patch, dim })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }
}

impl<T: Scalar> FeatureProvider<T> for FrozenRandomVit<T> {
    fn id(&self) -> &str {
        FROZEN_RANDOM_VIT
    }

    fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.image_size || s[2] != self.image_size || s[3] != self.channels {
            return Err(Error::DimensionMismatch(format!(
                "provider expects [B, {0}, {0}, {1}] images, got {s:?}",
                self.image_size, self.channels
            )));
        }
        let g = Graph::inference();
        let cx = Ctx::frozen(&g, &self.store);
        let x = patchify_tensor(g.constant(images.clone()), self.patch);
        let mut h = self.embed.forward(&cx, x) + cx.p(self.pos);
        for block in &self.blocks {
            h = block.forward(&cx, h, None);
        }
        let out = self.norm.forward(&cx, h).value();
        Ok((*out).clone())
    }
}

/// Looks up a provider by name.
pub fn build_provider<T: Scalar>(
    name: &str,
    image_size: usize,
    channels: usize,
    patch: usize,
    dim: usize,
) -> Result<Box<dyn FeatureProvider<T>>> {
    match name {
        FROZEN_RANDOM_VIT => Ok(Box::new(FrozenRandomVit::new(image_size, channels, patch, dim)?)),
        other => Err(Error::UnknownProvider(other.to_string())),
    }
}

/// Splits `l` into a `rows × cols` grid with `rows >= cols` as close to square as possible.
///
/// Fails when the best split is more than 2:1, which covers every prime `l > 2`.
pub fn near_square(l: usize) -> Result<(usize, usize)> {
    if l == 0 {
        return Err(Error::OutOfRange { what: "sequence length", detail: "0".into() });
    }
    let mut cols = (l as f64).sqrt().floor() as usize;
    while cols > 1 && l % cols != 0 {
        cols -= 1;
    }
    let rows = l / cols;
    if rows > 2 * cols {
        return Err(Error::DimensionMismatch(format!(
            "sequence length {l} has no near-square factorization (best {rows}x{cols}); pick L like 16x16 or 16x12"
        )));
    }
    Ok((rows, cols))
}

/// Source coordinates for half-pixel-centred bilinear resampling along one axis.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Resamples `rows × cols` grid features `[B, rows·cols, C]` to `out_rows × out_cols`.
pub fn resize_bilinear<T: Scalar>(
    y: &Tensor<T>,
    (rows, cols): (usize, usize),
    (out_rows, out_cols): (usize, usize),
) -> Tensor<T> {
    let (b, c) = (y.dim(0), y.dim(2));
    assert_eq!(y.dim(1), rows * cols);
    if (rows, cols) == (out_rows, out_cols) {
        return y.clone();
    }
    let ty = bilinear_taps(rows, out_rows);
    let tx = bilinear_taps(cols, out_cols);
    let src = y.data();
    let mut out = Vec::with_capacity(b * out_rows * out_cols * c);
    for bi in 0..b {
        let base = bi * rows * cols * c;
        let at = |r: usize, q: usize, ch: usize| src[base + (r * cols + q) * c + ch].as_f64();
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                for ch in 0..c {
                    let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                    let bottom = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                    out.push(T::of(top * (1.0 - fy) + bottom * fy));
                }
            }
        }
    }
    Tensor::from_vec(vec![b, out_rows * out_cols, c], out)
}

/// Reshapes square-grid features to 2D, resamples to a near-square grid of `l` cells, flattens.
pub fn interpolate_grid_to_sequence<T: Scalar>(y: &Tensor<T>, l: usize) -> Result<Tensor<T>> {
    if y.rank() != 3 {
        return Err(Error::DimensionMismatch(format!("features must be [B, N, C], got {:?}", y.shape())));
    }
    let n = y.dim(1);
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::GridMismatch(format!("feature count {n} is not a perfect square")));
    }
    let target = near_square(l)?;
    Ok(resize_bilinear(y, (side, side), target))
}

/// MLP head mapping model states to the provider's feature width.
#[derive(Clone, Debug)]
pub struct Projector {
    pub mlp: Mlp,
}

impl Projector {
    /// Three linear layers with SiLU, hidden width `max(input, output)`.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, input: usize, output: usize) -> Self {
        let w = input.max(output);
        Self { mlp: Mlp::new(init, &[input, w, w, output]) }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.mlp.forward(cx, x)
    }
}

/// `−mean cos(pred, target)` over every position, each cosine clamped to [−1, 1].
pub fn cosine_alignment_loss<'g, T: Scalar>(pred: Var<'g, T>, target: Var<'g, T>) -> Var<'g, T> {
    let dot = (pred * target).sum_last(false);
    let norms = (pred.square().sum_last(false) * target.square().sum_last(false)).add_scalar(1e-20).sqrt();
    (dot / norms).clamp(-1.0, 1.0).mean_all().neg()
}

fn check_grid(states: &[usize], y: &Tensor<impl Scalar>, what: &str) -> Result<()> {
    if states.len() != 3 || y.rank() != 3 || states[1] != y.dim(1) || states[0] != y.dim(0) {
        return Err(Error::GridMismatch(format!(
            "{what} states {states:?} do not match provider features {:?}",
            y.shape()
        )));
    }
    Ok(())
}

/// Aligns projected latent tokens with features resampled to the token count.
pub fn direct_alignment_loss<'g, T: Scalar>(
    cx: &Ctx<'g, '_, T>,
    z: Var<'g, T>,
    y: &Tensor<T>,
    proj: &Projector,
) -> Result<Var<'g, T>> {
    let target = interpolate_grid_to_sequence(y, z.dim(1))?;
    check_grid(&z.shape(), &target, "latent")?;
    Ok(cosine_alignment_loss(proj.forward(cx, z), cx.g.constant(target)))
}

/// Aligns projected encoder patch states with features on the same grid.
pub fn implicit_alignment_loss<'g, T: Scalar>(
    cx: &Ctx<'g, '_, T>,
    h_enc: Var<'g, T>,
    y: &Tensor<T>,
    proj: &Projector,
) -> Result<Var<'g, T>> {
    check_grid(&h_enc.shape(), y, "encoder")?;
    Ok(cosine_alignment_loss(proj.forward(cx, h_enc), cx.g.constant(y.clone())))
}

/// Aligns projected decoder mask-token states with features on the same grid.
pub fn decoder_alignment_loss<'g, T: Scalar>(
    cx: &Ctx<'g, '_, T>,
    h_dec: Var<'g, T>,
    y: &Tensor<T>,
    proj: &Projector,
) -> Result<Var<'g, T>> {
    check_grid(&h_dec.shape(), y, "decoder")?;
    Ok(cosine_alignment_loss(proj.forward(cx, h_dec), cx.g.constant(y.clone())))
}

/// Projectors owned by a run; at most one encoder-side and one decoder-side.
#[derive(Clone, Debug, Default)]
pub struct AlignmentHeads {
    pub encoder: Option<Projector>,
    pub decoder: Option<Projector>,
}

impl AlignmentHeads {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        mode: AlignMode,
        decoder_align: bool,
        width: usize,
        latent_dim: usize,
        feature_dim: usize,
    ) -> Self {
        let encoder = match mode {
            AlignMode::Direct => Some(Projector::new(&mut init.scope("enc_proj"), latent_dim, feature_dim)),
            AlignMode::Implicit => Some(Projector::new(&mut init.scope("enc_proj"), width, feature_dim)),
            AlignMode::None | AlignMode::Substitution => None,
        };
        let decoder = decoder_align.then(|| Projector::new(&mut init.scope("dec_proj"), width, feature_dim));
        Self { encoder, decoder }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factorizations() {
        assert_eq!(near_square(256).unwrap(), (16, 16));
        assert_eq!(near_square(192).unwrap(), (16, 12));
        assert_eq!(near_square(16).unwrap(), (4, 4));
        assert!(near_square(7).is_err());
        assert!(near_square(31).is_err());
    }

    #[test]
    fn two_by_two_to_four_by_four() {
        // channel values [[0, 0], [2, 2]]
        let y = Tensor::from_vec(vec![1, 4, 1], vec![0.0f64, 0.0, 2.0, 2.0]);
        let out = interpolate_grid_to_sequence(&y, 16).unwrap();
        let rows = [0.0, 0.5, 1.5, 2.0];
        for r in 0..4 {
            for c in 0..4 {
                assert!((out.data()[r * 4 + c] - rows[r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::<f64>::randn(vec![2, 16, 3], 1.0, &mut rng);
        assert_eq!(interpolate_grid_to_sequence(&y, 16).unwrap(), y);
        let c = Tensor::full(vec![1, 9, 2], 0.7f64);
        let out = interpolate_grid_to_sequence(&c, 192).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert!(matches!(interpolate_grid_to_sequence(&Tensor::<f64>::zeros(vec![1, 8, 2]), 4), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn cosine_loss_extremes() {
        let g = Graph::<f64>::inference();
        let a = g.constant(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, -3.0, 0.5]));
        let scaled = g.constant(Tensor::from_vec(vec![1, 2, 2], vec![2.0, 4.0, -6.0, 1.0]));
        assert!((cosine_alignment_loss(a, scaled).item() + 1.0).abs() < 1e-9);
        assert!((cosine_alignment_loss(a, a.neg()).item() - 1.0).abs() < 1e-9);
        let orth = g.constant(Tensor::from_vec(vec![1, 2, 2], vec![-2.0, 1.0, 0.5, 3.0]));
        assert!(cosine_alignment_loss(a, orth).item().abs() < 1e-12);
    }

    #[test]
    fn provider_is_deterministic_and_finite() {
        let p = build_provider::<f64>(FROZEN_RANDOM_VIT, 16, 3, 4, 8).unwrap();
        let q = build_provider::<f64>(FROZEN_RANDOM_VIT, 16, 3, 4, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(vec![2, 16, 16, 3], -1.0, 1.0, &mut rng);
        let a = p.extract(&x).unwrap();
        assert_eq!(a.shape(), &[2, 16, 8]);
        assert_eq!(a, q.extract(&x).unwrap());
        assert!(p.extract(&Tensor::zeros(vec![1, 16, 16, 3])).unwrap().all_finite());
        assert!(matches!(build_provider::<f64>("dinov2", 16, 3, 4, 8), Err(Error::UnknownProvider(_))));
    }
}
