//! Index-backpropagation quantization over cosine-similarity logits.
//!
//! The forward value of the soft index is an exact one-hot; its gradient is
//! the softmax Jacobian, so both the encoder and every codebook row receive
//! gradient.

use jointok_autograd::{ParamId, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, Ctx, Init};

/// Handle to the `K × d` code matrix plus its softmax temperature.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub id: ParamId,
    pub size: usize,
    pub dim: usize,
    pub temperature: f64,
}

impl Codebook {
    /// Unit-Gaussian rows, then ℓ2-normalized.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, size: usize, dim: usize, temperature: f64) -> Self {
        let mut c = Tensor::<T>::randn(vec![size, dim], 1.0, init.rng());
        for row in c.data_mut().chunks_exact_mut(dim) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            for v in row {
                *v /= norm;
            }
        }
        let id = init.tensor("codebook", c);
        Self { id, size, dim, temperature }
    }
}

/// The quantizer output bundle.
pub struct QuantizedLatent<'g, T: Scalar> {
    pub z: Var<'g, T>,
    /// cosine similarities over τ, `[B, L, K]`
    pub logits: Var<'g, T>,
    pub p: Var<'g, T>,
    /// `onehot(ids) + (p − sg(p))`
    pub ind: Var<'g, T>,
    /// row-major `[B·L]`
    pub ids: Vec<usize>,
    /// `Indᵀ C`, `[B, L, d]`
    pub z_q: Var<'g, T>,
}

/// `onehot(argmax p) + (p − stopgrad(p))`: value is an exact one-hot, gradient is that of `p`.
pub fn straight_through<'g, T: Scalar>(p: Var<'g, T>) -> (Var<'g, T>, Vec<usize>) {
    let pv = p.value();
    let ids = pv.argmax_last();
    let k = pv.last_dim();
    let onehot = Tensor::one_hot(&ids, k).reshape(pv.shape().to_vec());
    let ind = p.graph().constant(onehot) + (p - p.detach());
    (ind, ids)
}

fn check_nonzero_rows<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    let d = t.last_dim();
    if let Some(i) = t.rows().position(|r| r.iter().all(|v| *v == T::zero())) {
        return Err(Error::DegenerateInput(format!("{what} row {i} (of {} rows, dim {d}) has zero norm", t.numel() / d)));
    }
    Ok(())
}

/// Quantizes `z: [B, L, d]` against a codebook variable `c: [K, d]`.
pub fn quantize_with<'g, T: Scalar>(z: Var<'g, T>, c: Var<'g, T>, temperature: f64) -> Result<QuantizedLatent<'g, T>> {
    if !(temperature > 0.0) {
        return Err(Error::OutOfRange { what: "temperature", detail: format!("{temperature} must be > 0") });
    }
    let zs = z.shape();
    let cs = c.shape();
    if zs.len() != 3 || cs.len() != 2 || zs[2] != cs[1] {
        return Err(Error::DimensionMismatch(format!("latent {zs:?} incompatible with codebook {cs:?}")));
    }
    check_nonzero_rows(&z.value(), "latent token")?;
    check_nonzero_rows(&c.value(), "codebook")?;
    let logits = l2_normalize(z).matmul_t(l2_normalize(c)).scale(1.0 / temperature);
    let p = logits.softmax_last();
    let (ind, ids) = straight_through(p);
    let z_q = ind.matmul(c);
    Ok(QuantizedLatent { z, logits, p, ind, ids, z_q })
}

pub fn quantize<'g, T: Scalar>(cx: &Ctx<'g, '_, T>, z: Var<'g, T>, codebook: &Codebook) -> Result<QuantizedLatent<'g, T>> {
    quantize_with(z, cx.p(codebook.id), codebook.temperature)
}

/// `mean((z − sg(z_q))²)`; gradient reaches `z` only.
pub fn commitment_loss<'g, T: Scalar>(z: Var<'g, T>, z_q: Var<'g, T>) -> Var<'g, T> {
    (z - z_q.detach()).square().mean_all()
}

fn entropy_rows<'g, T: Scalar>(p: Var<'g, T>) -> Var<'g, T> {
    // p·log p with 0·log 0 = 0; rows of exactly one-hot p give exactly 0
    (p * p.clamp(1e-30, 1.0).log()).sum_last(false).neg()
}

/// Mean per-token entropy minus the entropy of the mean distribution.
pub fn entropy_loss<'g, T: Scalar>(p: Var<'g, T>) -> Var<'g, T> {
    let k = p.shape().last().copied().unwrap_or(1);
    let n = p.value().numel() / k;
    let rows = p.reshape(vec![n, k]);
    let per_token = entropy_rows(rows).mean_all();
    let mean = rows.mean_axis(0, false);
    per_token - entropy_rows(mean)
}

/// Fraction of codes whose empirical frequency exceeds `0.05 / K`.
pub fn code_usage(ids: &[usize], k: usize) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::Empty("code id stream"));
    }
    let hist = histogram(ids, k)?;
    let threshold = 0.05 / k as f64;
    let total = ids.len() as f64;
    Ok(hist.iter().filter(|&&c| c as f64 / total > threshold).count() as f64 / k as f64)
}

pub fn histogram(ids: &[usize], k: usize) -> Result<Vec<u64>> {
    let mut hist = vec![0u64; k];
    for &i in ids {
        if i >= k {
            return Err(Error::OutOfRange { what: "code id", detail: format!("{i} >= K={k}") });
        }
        hist[i] += 1;
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use jointok_autograd::Graph;

    #[test]
    fn closed_form_two_codes() {
        let g = Graph::<f64>::new();
        let z = g.input(Tensor::from_vec(vec![1, 1, 2], vec![1.0, 0.0]));
        let c = g.input(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let q = quantize_with(z, c, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_eq!(q.logits.value().data(), &[1.0, 0.0]);
        assert!((q.p.value().data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert_eq!(q.ids, vec![0]);
        assert_eq!(q.z_q.value().data(), &[1.0, 0.0]);
        assert_eq!(q.ind.value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_latent_is_degenerate() {
        let g = Graph::<f64>::new();
        let z = g.input(Tensor::zeros(vec![1, 1, 2]));
        let c = g.input(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        assert!(matches!(quantize_with(z, c, 1.0), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn ties_pick_lowest_index() {
        let g = Graph::<f64>::new();
        let z = g.input(Tensor::from_vec(vec![1, 1, 2], vec![1.0, 1.0]));
        let c = g.input(Tensor::from_vec(vec![3, 2], vec![0.0, 1.0, 1.0, 0.0, -1.0, 0.0]));
        assert_eq!(quantize_with(z, c, 1.0).unwrap().ids, vec![0]);
    }

    #[test]
    fn commitment_examples() {
        let g = Graph::<f64>::new();
        let z = g.input(Tensor::from_vec(vec![1, 1, 2], vec![1.0, 0.0]));
        let zq = g.constant(Tensor::zeros(vec![1, 1, 2]));
        assert_eq!(commitment_loss(z, zq).item(), 0.5);
        assert_eq!(commitment_loss(z, z).item(), 0.0);
    }

    #[test]
    fn entropy_closed_forms() {
        let g = Graph::<f64>::inference();
        let k = 4;
        let uniform = g.constant(Tensor::full(vec![2, 3, k], 0.25));
        assert!(entropy_loss(uniform).item().abs() < 1e-12);
        let same = g.constant(Tensor::one_hot(&[1, 1, 1], k));
        assert_eq!(entropy_loss(same).item(), 0.0);
        let distinct = g.constant(Tensor::one_hot(&[0, 1, 2, 3], k).reshape(vec![2, 2, k]));
        assert!((entropy_loss(distinct).item() + (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn usage_examples() {
        let all: Vec<usize> = (0..4096).collect();
        assert_eq!(code_usage(&all, 4096).unwrap(), 1.0);
        assert_eq!(code_usage(&[0; 100], 4096).unwrap(), 1.0 / 4096.0);
        assert!(code_usage(&[], 4).is_err());
    }
}
