//! Loss terms and their weighted assembly.

use std::collections::BTreeMap;

use jointok_autograd::{Graph, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{component_rng, global_avg_pool, Conv, Ctx, Init, Linear};

const PERCEPTUAL_SEED: u64 = 0x9e7c_e971;

/// Frozen convolutional feature stack used as the perceptual distance.
pub struct PerceptualNet<T: Scalar> {
    store: ParamStore<T>,
    layers: Vec<Conv>,
}

impl<T: Scalar> PerceptualNet<T> {
    pub fn new(channels: usize) -> Self {
        let mut store = ParamStore::new();
        let mut rng = component_rng(PERCEPTUAL_SEED, "perceptual");
        let mut init = Init::new(&mut store, &mut rng);
        let layers = vec![
            init.conv("c0", channels, 8, 3, 1, 1),
            init.conv("c1", 8, 16, 3, 2, 1),
            init.conv("c2", 16, 32, 3, 2, 1),
        ];
        Self { store, layers }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn features<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Vec<Var<'g, T>> {
        let cx = Ctx::frozen(g, &self.store);
        let mut h = x;
        self.layers
            .iter()
            .map(|layer| {
                h = layer.forward(&cx, h).leaky_relu(0.2);
                h
            })
            .collect()
    }

    /// Sum over layers of the mean squared feature difference.
    pub fn distance<'g>(&self, g: &'g Graph<T>, x_hat: Var<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let a = self.features(g, x_hat);
        let b = self.features(g, x);
        a.into_iter()
            .zip(b)
            .map(|(fa, fb)| (fa - fb).square().mean_all())
            .reduce(|acc, v| acc + v)
            .expect("at least one layer")
    }
}

/// Four strided convolution blocks, global average pooling and a linear score.
#[derive(Clone, Debug)]
pub struct Discriminator {
    blocks: Vec<Conv>,
    head: Linear,
}

impl Discriminator {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize, base: usize) -> Self {
        let widths = [channels, base, 2 * base, 4 * base, 4 * base];
        let blocks = widths.windows(2).enumerate().map(|(i, w)| init.conv(&format!("b{i}"), w[0], w[1], 4, 2, 1)).collect();
        let head = init.linear("head", 4 * base, 1);
        Self { blocks, head }
    }

    /// One real-valued score per image, `[B]`.
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let b = x.dim(0);
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(cx, h).leaky_relu(0.2);
        }
        self.head.forward(cx, global_avg_pool(h)).reshape(vec![b])
    }
}

pub fn mse<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    (a - b).square().mean_all()
}

/// Hinge discriminator loss `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`.
pub fn hinge_d_loss<'g, T: Scalar>(d_real: Var<'g, T>, d_fake: Var<'g, T>) -> Var<'g, T> {
    d_real.neg().add_scalar(1.0).relu().mean_all() + d_fake.add_scalar(1.0).relu().mean_all()
}

/// Generator-side adversarial term `−mean(D(fake))`.
pub fn hinge_g_loss<'g, T: Scalar>(d_fake: Var<'g, T>) -> Var<'g, T> {
    d_fake.mean_all().neg()
}

/// EMA anchors of discriminator outputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LecamAnchors {
    pub ema_real: f64,
    pub ema_fake: f64,
    pub decay: f64,
}

impl LecamAnchors {
    pub fn new(decay: f64) -> Self {
        Self { ema_real: 0.0, ema_fake: 0.0, decay }
    }

    pub fn update(&mut self, mean_real: f64, mean_fake: f64) {
        self.ema_real = self.decay * self.ema_real + (1.0 - self.decay) * mean_real;
        self.ema_fake = self.decay * self.ema_fake + (1.0 - self.decay) * mean_fake;
    }
}

/// `mean((D(real) − ema_fake)²) + mean((D(fake) − ema_real)²)`.
pub fn lecam_loss<'g, T: Scalar>(d_real: Var<'g, T>, d_fake: Var<'g, T>, anchors: &LecamAnchors) -> Var<'g, T> {
    d_real.add_scalar(-anchors.ema_fake).square().mean_all() + d_fake.add_scalar(-anchors.ema_real).square().mean_all()
}

/// Discriminator-side losses for one batch: `(hinge, lecam)`.
pub fn gan_step_losses<'g, T: Scalar>(
    cx: &Ctx<'g, '_, T>,
    disc: &Discriminator,
    x_real: Var<'g, T>,
    x_fake: Var<'g, T>,
    anchors: &LecamAnchors,
) -> (Var<'g, T>, Var<'g, T>, Var<'g, T>) {
    let d_real = disc.forward(cx, x_real);
    let d_fake = disc.forward(cx, x_fake);
    (hinge_d_loss(d_real, d_fake), hinge_g_loss(d_fake), lecam_loss(d_real, d_fake, anchors))
}

/// Returns `L` with probability `1 − p_apply`, otherwise a uniform draw from `1..=L`.
pub fn nested_dropout_sample<R: Rng>(l: usize, p_apply: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < p_apply {
        rng.random_range(1..=l)
    } else {
        l
    }
}

/// Non-negative weights of every loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon_l2: f64,
    pub recon_perc: f64,
    pub gan: f64,
    pub lecam: f64,
    pub reg: f64,
    pub entropy: f64,
    pub ntp: f64,
    pub apr_l2: f64,
    pub apr_perc: f64,
    pub sem: f64,
    pub dec_align: f64,
    pub aux_ntp: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            recon_l2: cfg.lambda_recon_l2,
            recon_perc: cfg.lambda_recon_perc,
            gan: cfg.lambda_gan,
            lecam: cfg.lambda_lecam,
            reg: cfg.lambda_reg,
            entropy: cfg.lambda_entropy,
            ntp: cfg.lambda_ntp,
            apr_l2: cfg.lambda_apr_l2,
            apr_perc: cfg.lambda_apr_perc,
            sem: cfg.lambda_sem,
            dec_align: cfg.lambda_dec_align,
            aux_ntp: if cfg.aux_ar { cfg.aux_weight } else { 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = serde_json::to_value(self).expect("weights serialize");
        for (k, w) in v.as_object().expect("object") {
            let w = w.as_f64().unwrap_or(f64::NAN);
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidValue { key: k.clone(), reason: format!("weight {w} must be finite and >= 0") });
            }
        }
        Ok(())
    }

    pub fn apr_enabled(&self) -> bool {
        self.apr_l2 > 0.0 || self.apr_perc > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Named loss components, their weights, the weighted total, and extra metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub terms: Vec<LossTerm>,
    pub total: f64,
    pub metrics: BTreeMap<String, f64>,
}

impl LossBundle {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    /// Flat record with `loss/<name>`, `weight/<name>`, `total` and every metric.
    pub fn to_record(&self) -> BTreeMap<String, f64> {
        let mut out = self.metrics.clone();
        for t in &self.terms {
            out.insert(format!("loss/{}", t.name), t.value);
            out.insert(format!("weight/{}", t.name), t.weight);
        }
        out.insert("total".into(), self.total);
        out
    }
}

/// Sums `weight · value` over components into a differentiable total.
///
/// Zero-weight terms are logged but left out of the graph. Any non-finite
/// component aborts with an error naming it.
pub fn total_loss<'g, T: Scalar>(terms: &[(&str, Var<'g, T>, f64)]) -> Result<(Option<Var<'g, T>>, LossBundle)> {
    let mut bundle = LossBundle::default();
    let mut total: Option<Var<'g, T>> = None;
    for &(name, var, weight) in terms {
        let value = var.item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { term: name.to_string() });
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::InvalidValue { key: name.to_string(), reason: format!("weight {weight}") });
        }
        bundle.terms.push(LossTerm { name: name.to_string(), value, weight });
        if weight == 0.0 {
            continue;
        }
        let w = if weight == 1.0 { var } else { var.scale(weight) };
        total = Some(match total {
            Some(t) => t + w,
            None => w,
        });
    }
    bundle.total = total.map(|t| t.item().as_f64()).unwrap_or(0.0);
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use jointok_autograd::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lecam_examples() {
        let g = Graph::<f64>::inference();
        let anchors = LecamAnchors { ema_real: 0.0, ema_fake: 0.0, decay: 0.99 };
        let real = g.constant(Tensor::from_vec(vec![1], vec![1.0]));
        let fake = g.constant(Tensor::from_vec(vec![1], vec![0.0]));
        assert_eq!(lecam_loss(real, fake, &anchors).item(), 1.0);
        let fixed = LecamAnchors { ema_real: 0.0, ema_fake: 1.0, decay: 0.99 };
        assert_eq!(lecam_loss(real, fake, &fixed).item(), 0.0);
    }

    #[test]
    fn mse_examples() {
        let g = Graph::<f64>::inference();
        let x = g.constant(Tensor::ones(vec![1, 2, 2, 3]));
        assert_eq!(mse(x.neg(), x).item(), 4.0);
        assert_eq!(mse(x, x).item(), 0.0);
        let p = PerceptualNet::<f64>::new(3);
        assert_eq!(p.distance(&g, x, x).item(), 0.0);
    }

    #[test]
    fn nested_dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| nested_dropout_sample(7, 0.0, &mut rng) == 7));
        assert!((0..1000).all(|_| (1..=7).contains(&nested_dropout_sample(7, 1.0, &mut rng))));
    }

    #[test]
    fn total_is_weighted_sum_and_nan_names_term() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::scalar(1.0));
        let b = g.input(Tensor::scalar(2.0));
        let c = g.input(Tensor::scalar(3.0));
        let (_, bundle) = total_loss(&[("a", a, 1.0), ("b", b, 1.0), ("c", c, 1.0)]).unwrap();
        assert_eq!(bundle.total, 6.0);
        let nan = g.input(Tensor::scalar(f64::NAN));
        match total_loss(&[("a", a, 1.0), ("apr_l2", nan, 1.0)]) {
            Err(Error::NonFinite { term }) => assert_eq!(term, "apr_l2"),
            other => panic!("expected non-finite error, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn discriminator_scores_each_image() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Discriminator::new(&mut Init::new(&mut store, &mut rng), 3, 4);
        let g = Graph::inference();
        let x = g.constant(Tensor::uniform(vec![3, 16, 16, 3], -1.0, 1.0, &mut rng));
        assert_eq!(d.forward(&Ctx::new(&g, &store), x).shape(), vec![3]);
    }
}
