//! Single-stage joint training of tokenizer, generator and discriminator.
//!
//! One [`TrainState::train_step`] runs the generator-side forward pass,
//! backpropagates the weighted total into every trainable store, takes one
//! Adam step per store, then updates the discriminator on detached
//! reconstructions and finally the EMA shadows. All randomness of a step
//! derives from `(seed, step)`, so a resumed run replays an uninterrupted one.

use std::collections::BTreeMap;

use jointok_autograd::{clip_grad_norm, Adam, Gradients, Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    build_provider, decoder_alignment_loss, direct_alignment_loss, implicit_alignment_loss, AlignmentHeads, FeatureProvider,
};
use crate::config::{AlignMode, TrainConfig};
use crate::data::{BatchSchedule, Dataset};
use crate::error::{Error, Result};
use crate::generator::{ar_accuracy, class_dropout, ntp_loss, ArConfig, ArModel};
use crate::nn::{component_rng, Ctx, Init};
use crate::objectives::{
    hinge_d_loss, hinge_g_loss, lecam_loss, mse, nested_dropout_sample, total_loss, Discriminator, LecamAnchors, LossBundle,
    LossWeights, PerceptualNet,
};
use crate::quantizer::{code_usage, commitment_loss, entropy_loss, quantize, Codebook};
use crate::tokenizer::{ImageBatch, Tokenizer, TokenizerConfig};

const ADAM_EPS: f64 = 1e-8;

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::OutOfRange { what: "step", detail: format!("{step} not in 0..={total_steps}") });
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// `shadow ← decay·shadow + (1 − decay)·params`, elementwise.
pub fn ema_update<T: Scalar>(shadow: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::DimensionMismatch(format!("EMA tree has {} tensors, model {}", shadow.len(), params.len())));
    }
    for ((_, sn, st), (_, pn, pt)) in shadow.iter().zip(params.iter()) {
        if sn != pn || st.shape() != pt.shape() {
            return Err(Error::DimensionMismatch(format!(
                "EMA entry {sn} {:?} does not match {pn} {:?}",
                st.shape(),
                pt.shape()
            )));
        }
    }
    if decay == 1.0 {
        return Ok(());
    }
    let (a, b) = (T::of(decay), T::of(1.0 - decay));
    let ids: Vec<_> = shadow.ids().collect();
    for id in ids {
        let p = params.get(id);
        let s = shadow.get_mut(id);
        if decay == 0.0 {
            s.data_mut().copy_from_slice(p.data());
            continue;
        }
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = a * *sv + b * pv;
        }
    }
    Ok(())
}

/// Parameter handles of every trainable component.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub tokenizer: Tokenizer,
    pub codebook: Codebook,
    pub ar: ArModel,
    pub aux: Option<ArModel>,
    pub heads: AlignmentHeads,
    pub disc: Discriminator,
}

pub fn tokenizer_config(cfg: &TrainConfig) -> TokenizerConfig {
    TokenizerConfig {
        image_size: cfg.image_size,
        channels: cfg.channels,
        patch_size: cfg.patch_size,
        width: cfg.width,
        heads: cfg.heads,
        enc_layers: cfg.enc_layers,
        dec_layers: cfg.dec_layers,
        mlp_ratio: cfg.mlp_ratio,
        latent_dim: cfg.latent_dim,
        num_tokens: cfg.num_tokens,
        substitution_dim: (cfg.align_mode == AlignMode::Substitution).then_some(cfg.provider_dim),
    }
}

pub fn ar_config(cfg: &TrainConfig, layers: usize) -> ArConfig {
    ArConfig {
        layers,
        heads: cfg.ar_heads,
        width: cfg.ar_width,
        vocab: cfg.codebook_size,
        seq_len: cfg.num_tokens,
        num_classes: cfg.num_classes,
    }
}

fn needs_provider(cfg: &TrainConfig) -> bool {
    cfg.align_mode != AlignMode::None || cfg.decoder_align
}

/// Inference-only handle on a tokenizer and its codebook.
#[derive(Clone, Copy)]
pub struct TokenizerView<'a, T: Scalar> {
    pub tokenizer: &'a Tokenizer,
    pub codebook: &'a Codebook,
    pub store: &'a ParamStore<T>,
    /// required in substitution mode, where the encoder reads provider features
    pub provider: Option<&'a dyn FeatureProvider<T>>,
}

/// Quantized codes of a batch.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    /// row-major `[B·L]`
    pub ids: Vec<usize>,
    /// continuous latents `[B, L, d]`
    pub z: Tensor<T>,
}

const INFERENCE_CHUNK: usize = 64;

impl<T: Scalar> TokenizerView<'_, T> {
    pub fn num_tokens(&self) -> usize {
        self.tokenizer.cfg.num_tokens
    }

    pub fn codebook_tensor(&self) -> &Tensor<T> {
        self.store.get(self.codebook.id)
    }

    fn encode_chunk(&self, images: &Tensor<T>) -> Result<Encoded<T>> {
        let g = Graph::inference();
        let cx = Ctx::frozen(&g, self.store);
        let enc = if self.tokenizer.cfg.substitution_dim.is_some() {
            let provider = self.provider.ok_or_else(|| Error::ModeMismatch("substitution encoder needs a feature provider".into()))?;
            let y = provider.extract(images)?;
            self.tokenizer.encode_tokens(&cx, self.tokenizer.substitute_patches(&cx, g.constant(y))?)?
        } else {
            self.tokenizer.encode(&cx, g.constant(images.clone()))?
        };
        let q = quantize(&cx, enc.z, self.codebook)?;
        Ok(Encoded { ids: q.ids, z: (*q.z.value()).clone() })
    }

    /// Encodes and quantizes `[B, H, W, C]` images in chunks.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Encoded<T>> {
        let b = images.dim(0);
        if b == 0 {
            return Err(Error::Empty("image batch"));
        }
        let mut ids = Vec::with_capacity(b * self.num_tokens());
        let mut zs = Vec::new();
        for start in (0..b).step_by(INFERENCE_CHUNK) {
            let n = INFERENCE_CHUNK.min(b - start);
            let e = self.encode_chunk(&images.narrow(0, start, n))?;
            ids.extend(e.ids);
            zs.push(e.z);
        }
        let refs: Vec<&Tensor<T>> = zs.iter().collect();
        Ok(Encoded { ids, z: Tensor::concat(&refs, 0) })
    }

    /// Decodes row-major ids `[B·L]` keeping the first `prefix_len` tokens.
    pub fn decode_ids(&self, ids: &[usize], prefix_len: usize) -> Result<Tensor<T>> {
        let l = self.num_tokens();
        if ids.is_empty() || ids.len() % l != 0 {
            return Err(Error::DimensionMismatch(format!("{} ids do not form sequences of length {l}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.codebook.size) {
            return Err(Error::OutOfRange { what: "code id", detail: format!("{bad} >= K={}", self.codebook.size) });
        }
        let b = ids.len() / l;
        let mut out = Vec::new();
        for start in (0..b).step_by(INFERENCE_CHUNK) {
            let n = INFERENCE_CHUNK.min(b - start);
            let g = Graph::inference();
            let cx = Ctx::frozen(&g, self.store);
            let z_q = cx.p(self.codebook.id).index_select(&ids[start * l..(start + n) * l]).reshape(vec![n, l, self.codebook.dim]);
            out.push((*self.tokenizer.decode(&cx, z_q, prefix_len, None)?.pixels.value()).clone());
        }
        let refs: Vec<&Tensor<T>> = out.iter().collect();
        Ok(Tensor::concat(&refs, 0))
    }

    pub fn reconstruct(&self, images: &Tensor<T>, prefix_len: usize) -> Result<Tensor<T>> {
        let enc = self.encode(images)?;
        self.decode_ids(&enc.ids, prefix_len)
    }
}

/// Inference-only handle on a generator.
#[derive(Clone, Copy)]
pub struct ArView<'a, T: Scalar> {
    pub model: &'a ArModel,
    pub store: &'a ParamStore<T>,
}

/// Everything a run mutates: parameters, EMA shadows, optimizer states and counters.
pub struct TrainState<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: JointModel,
    pub tok: ParamStore<T>,
    pub ar: ParamStore<T>,
    pub aux: Option<ParamStore<T>>,
    pub proj: ParamStore<T>,
    pub disc: ParamStore<T>,
    pub ema_tok: ParamStore<T>,
    pub ema_ar: ParamStore<T>,
    pub ema_aux: Option<ParamStore<T>>,
    pub opt_tok: Adam<T>,
    pub opt_ar: Adam<T>,
    pub opt_aux: Option<Adam<T>>,
    pub opt_proj: Adam<T>,
    pub opt_disc: Adam<T>,
    pub lecam: LecamAnchors,
    pub step: usize,
    pub weights: LossWeights,
    pub perceptual: PerceptualNet<T>,
    pub provider: Option<Box<dyn FeatureProvider<T>>>,
}

/// Per-step random choices.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub prefix_len: usize,
    /// labels seen by the generator after class dropout
    pub ar_labels: Vec<usize>,
    pub gan_active: bool,
}

/// Differentiable outputs of the generator-side forward pass.
pub struct ForwardPass<'g, T: Scalar> {
    /// `(name, value, weight)` for every loss term in logging order
    pub terms: Vec<(&'static str, Var<'g, T>, f64)>,
    pub recon: Var<'g, T>,
    pub apr_recon: Option<Var<'g, T>>,
    pub ids: Vec<usize>,
    pub ar_logits: Var<'g, T>,
    pub metrics: BTreeMap<String, f64>,
}

impl<T: Scalar> TrainState<T> {
    /// Builds a fresh state; every component draws its initialization from `(seed, component)`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if T::DTYPE != cfg.precision.dtype() {
            return Err(Error::InvalidValue {
                key: "precision".into(),
                reason: format!("state scalar is {} but config asks for {:?}", T::DTYPE.name(), cfg.precision),
            });
        }
        let weights = LossWeights::from_config(&cfg);
        weights.validate()?;
        let provider = if needs_provider(&cfg) {
            let p = build_provider::<T>(&cfg.provider, cfg.image_size, cfg.channels, cfg.provider_patch, cfg.provider_dim)?;
            let grid_tokens = p.grid() * p.grid();
            let patch_aligned = cfg.align_mode == AlignMode::Implicit || cfg.align_mode == AlignMode::Substitution || cfg.decoder_align;
            if patch_aligned && grid_tokens != cfg.num_patches() {
                return Err(Error::GridMismatch(format!(
                    "provider grid {0}x{0} does not match the {1} tokenizer patches",
                    p.grid(),
                    cfg.num_patches()
                )));
            }
            Some(p)
        } else {
            None
        };

        let mut tok = ParamStore::new();
        let mut rng = component_rng(cfg.seed, "tokenizer");
        let (tokenizer, codebook) = {
            let mut init = Init::new(&mut tok, &mut rng);
            let t = Tokenizer::new(&mut init, tokenizer_config(&cfg));
            let c = Codebook::new(&mut init, cfg.codebook_size, cfg.latent_dim, cfg.temperature);
            (t, c)
        };
        let mut ar = ParamStore::new();
        let ar_model = ArModel::new(&mut Init::new(&mut ar, &mut component_rng(cfg.seed, "ar")), ar_config(&cfg, cfg.ar_layers));
        let (aux_model, aux) = if cfg.aux_ar {
            let mut s = ParamStore::new();
            let m = ArModel::new(&mut Init::new(&mut s, &mut component_rng(cfg.seed, "aux")), ar_config(&cfg, cfg.aux_layers));
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        let mut proj = ParamStore::new();
        let heads = AlignmentHeads::new(
            &mut Init::new(&mut proj, &mut component_rng(cfg.seed, "projectors")),
            cfg.align_mode,
            cfg.decoder_align,
            cfg.width,
            cfg.latent_dim,
            cfg.provider_dim,
        );
        let mut disc = ParamStore::new();
        let disc_model =
            Discriminator::new(&mut Init::new(&mut disc, &mut component_rng(cfg.seed, "disc")), cfg.channels, cfg.disc_channels);

        let opt_tok = Adam::new(&tok, cfg.beta1, cfg.beta2_tokenizer, ADAM_EPS);
        let opt_ar = Adam::new(&ar, cfg.beta1, cfg.beta2_ar, ADAM_EPS);
        let opt_aux = aux.as_ref().map(|s| Adam::new(s, cfg.beta1, cfg.beta2_ar, ADAM_EPS));
        let opt_proj = Adam::new(&proj, cfg.beta1, cfg.beta2_tokenizer, ADAM_EPS);
        let opt_disc = Adam::new(&disc, 0.9, 0.999, ADAM_EPS);
        Ok(Self {
            model: JointModel { tokenizer, codebook, ar: ar_model, aux: aux_model, heads, disc: disc_model },
            ema_tok: tok.clone(),
            ema_ar: ar.clone(),
            ema_aux: aux.clone(),
            tok,
            ar,
            aux,
            proj,
            disc,
            opt_tok,
            opt_ar,
            opt_aux,
            opt_proj,
            opt_disc,
            lecam: LecamAnchors::new(cfg.lecam_decay),
            step: 0,
            weights,
            perceptual: PerceptualNet::new(cfg.channels),
            provider,
            cfg,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.total_steps()
    }

    /// Tokenizer view on the live (`ema = false`) or EMA parameters.
    pub fn tokenizer_view(&self, ema: bool) -> TokenizerView<'_, T> {
        TokenizerView {
            tokenizer: &self.model.tokenizer,
            codebook: &self.model.codebook,
            store: if ema { &self.ema_tok } else { &self.tok },
            provider: self.provider.as_deref(),
        }
    }

    pub fn ar_view(&self, ema: bool) -> ArView<'_, T> {
        ArView { model: &self.model.ar, store: if ema { &self.ema_ar } else { &self.ar } }
    }

    pub fn aux_view(&self, ema: bool) -> Option<ArView<'_, T>> {
        let model = self.model.aux.as_ref()?;
        let store = if ema { self.ema_aux.as_ref()? } else { self.aux.as_ref()? };
        Some(ArView { model, store })
    }

    /// Seeded random stream of one step.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7a11_57e9);
        rng.set_stream(step as u64);
        rng
    }

    pub fn plan(&self, step: usize, labels: &[usize]) -> StepPlan {
        let mut rng = self.step_rng(step);
        let prefix_len = nested_dropout_sample(self.cfg.num_tokens, self.cfg.nested_dropout, &mut rng);
        let ar_labels = class_dropout(labels, self.cfg.class_dropout, self.model.ar.cfg.null_class(), &mut rng);
        let warmup = (self.cfg.gan_warmup * self.total_steps() as f64).ceil() as usize;
        StepPlan { prefix_len, ar_labels, gan_active: self.weights.gan > 0.0 && step >= warmup }
    }

    /// Generator-side forward pass with every loss term on one batch.
    pub fn forward<'g>(&self, g: &'g Graph<T>, batch: &ImageBatch<T>, plan: &StepPlan) -> Result<ForwardPass<'g, T>> {
        let cfg = &self.cfg;
        let w = &self.weights;
        let m = &self.model;
        let b = batch.len();
        if b == 0 {
            return Err(Error::Empty("training batch"));
        }
        let tcx = Ctx::new(g, &self.tok);
        let acx = Ctx::new(g, &self.ar);
        let pcx = Ctx::new(g, &self.proj);
        let x = g.constant(batch.pixels.clone());

        let y = match &self.provider {
            Some(p) => Some(p.extract(&batch.pixels)?),
            None => None,
        };
        let enc = if cfg.align_mode == AlignMode::Substitution {
            let y = y.as_ref().expect("provider present in substitution mode");
            m.tokenizer.encode_tokens(&tcx, m.tokenizer.substitute_patches(&tcx, g.constant(y.clone()))?)?
        } else {
            m.tokenizer.encode(&tcx, x)?
        };
        let q = quantize(&tcx, enc.z, &m.codebook)?;

        let apr = w.apr_enabled();
        let ar_in = if cfg.ntp_backprop { q.ind } else { q.ind.detach() };
        let codebook = tcx.p(m.codebook.id);
        let pred = m.ar.forward_teacher_forcing(&acx, ar_in, &plan.ar_labels, apr.then_some(codebook))?;

        let capture = cfg.decoder_align.then(|| cfg.decoder_align_block());
        let (recon, apr_recon, h_dec) = match pred.pred_z_q {
            Some(pz) => {
                let both = g.concat(&[q.z_q, pz], 0);
                let out = m.tokenizer.decode(&tcx, both, plan.prefix_len, capture)?;
                (out.pixels.narrow(0, 0, b), Some(out.pixels.narrow(0, b, b)), out.h_dec.map(|h| h.narrow(0, 0, b)))
            }
            None => {
                let out = m.tokenizer.decode(&tcx, q.z_q, plan.prefix_len, capture)?;
                (out.pixels, None, out.h_dec)
            }
        };

        let mut terms: Vec<(&'static str, Var<'g, T>, f64)> = Vec::new();
        let zero = g.scalar(T::zero());
        terms.push(("recon_l2", mse(recon, x), w.recon_l2));
        terms.push(("recon_perc", if w.recon_perc > 0.0 { self.perceptual.distance(g, recon, x) } else { zero }, w.recon_perc));
        if plan.gan_active {
            let dcx = Ctx::frozen(g, &self.disc);
            terms.push(("gan", hinge_g_loss(m.disc.forward(&dcx, recon)), w.gan));
        } else {
            terms.push(("gan", zero, 0.0));
        }
        terms.push(("reg", commitment_loss(q.z, q.z_q), w.reg));
        terms.push(("entropy", entropy_loss(q.p), w.entropy));
        let ntp = ntp_loss(pred.logits, &q.ids);
        terms.push(("ntp", ntp, w.ntp));
        match apr_recon {
            Some(xa) => {
                terms.push(("apr_l2", mse(xa, x), w.apr_l2));
                terms.push(("apr_perc", if w.apr_perc > 0.0 { self.perceptual.distance(g, xa, x) } else { zero }, w.apr_perc));
            }
            None => {
                terms.push(("apr_l2", zero, 0.0));
                terms.push(("apr_perc", zero, 0.0));
            }
        }
        let sem = match (cfg.align_mode, &m.heads.encoder, &y) {
            (AlignMode::Direct, Some(p), Some(y)) => Some(direct_alignment_loss(&pcx, q.z, y, p)?),
            (AlignMode::Implicit, Some(p), Some(y)) => Some(implicit_alignment_loss(&pcx, enc.h_enc, y, p)?),
            _ => None,
        };
        terms.push(match sem {
            Some(v) => ("sem", v, w.sem),
            None => ("sem", zero, 0.0),
        });
        let dec = match (&m.heads.decoder, h_dec, &y) {
            (Some(p), Some(h), Some(y)) => Some(decoder_alignment_loss(&pcx, h, y, p)?),
            _ => None,
        };
        terms.push(match dec {
            Some(v) => ("dec_align", v, w.dec_align),
            None => ("dec_align", zero, 0.0),
        });
        if let (Some(aux), Some(store)) = (&m.aux, &self.aux) {
            let xcx = Ctx::new(g, store);
            let aux_pred = aux.forward_teacher_forcing(&xcx, q.ind.detach(), &plan.ar_labels, None)?;
            terms.push(("aux_ntp", ntp_loss(aux_pred.logits, &q.ids), w.aux_ntp));
        }

        let mut metrics = BTreeMap::new();
        metrics.insert("ar_accuracy".into(), ar_accuracy(&pred.logits.value(), &q.ids));
        metrics.insert("code_usage".into(), code_usage(&q.ids, m.codebook.size)?);
        metrics.insert("prefix_len".into(), plan.prefix_len as f64);
        Ok(ForwardPass { terms, recon, apr_recon, ids: q.ids, ar_logits: pred.logits, metrics })
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &ImageBatch<T>) -> Result<LossBundle> {
        let step = self.step;
        let total = self.total_steps();
        let lr = cosine_lr(step.min(total), total, self.cfg.lr, self.cfg.lr_min)?;
        let plan = self.plan(step, &batch.labels);
        let g = Graph::new();
        let fwd = self.forward(&g, batch, &plan)?;
        let (root, mut bundle) = total_loss(&fwd.terms)?;
        bundle.metrics.extend(fwd.metrics.clone());
        bundle.metrics.insert("lr".into(), lr);
        let recon = (*fwd.recon.value()).clone();
        let grads = root.map(|r| g.backward(r));
        drop(fwd);
        drop(g);

        if let Some(grads) = &grads {
            let clip = self.cfg.grad_clip;
            let norm = apply(&mut self.tok, &mut self.opt_tok, grads, clip, lr);
            bundle.metrics.insert("grad_norm/tokenizer".into(), norm);
            let norm = apply(&mut self.ar, &mut self.opt_ar, grads, clip, lr);
            bundle.metrics.insert("grad_norm/ar".into(), norm);
            if let (Some(store), Some(opt)) = (&mut self.aux, &mut self.opt_aux) {
                apply(store, opt, grads, clip, lr);
            }
            apply(&mut self.proj, &mut self.opt_proj, grads, clip, lr);
        }

        if plan.gan_active {
            let (d_loss, lecam) = self.disc_step(&batch.pixels, &recon)?;
            bundle.metrics.insert("disc/loss".into(), d_loss);
            bundle.metrics.insert("disc/lecam".into(), lecam);
        }

        let decay = self.cfg.ema_decay;
        ema_update(&mut self.ema_tok, &self.tok, decay)?;
        ema_update(&mut self.ema_ar, &self.ar, decay)?;
        if let (Some(shadow), Some(live)) = (&mut self.ema_aux, &self.aux) {
            ema_update(shadow, live, decay)?;
        }
        self.step += 1;
        Ok(bundle)
    }

    /// Hinge plus LeCam update of the discriminator on detached reconstructions.
    fn disc_step(&mut self, real: &Tensor<T>, fake: &Tensor<T>) -> Result<(f64, f64)> {
        let g = Graph::new();
        let cx = Ctx::new(&g, &self.disc);
        let d_real = self.model.disc.forward(&cx, g.constant(real.clone()));
        let d_fake = self.model.disc.forward(&cx, g.constant(fake.clone()));
        let hinge = hinge_d_loss(d_real, d_fake);
        let lecam = lecam_loss(d_real, d_fake, &self.lecam);
        let (root, bundle) = total_loss(&[("disc_hinge", hinge, 1.0), ("disc_lecam", lecam, self.weights.lecam)])?;
        let (mean_real, mean_fake) = (d_real.value().mean().as_f64(), d_fake.value().mean().as_f64());
        if let Some(root) = root {
            let grads = g.backward(root);
            apply(&mut self.disc, &mut self.opt_disc, &grads, self.cfg.grad_clip, self.cfg.disc_lr);
        }
        self.lecam.update(mean_real, mean_fake);
        Ok((bundle.get("disc_hinge").unwrap_or(0.0), bundle.get("disc_lecam").unwrap_or(0.0)))
    }

    /// Runs `steps` optimizer steps drawing batches from `data`; `on_step` sees every bundle.
    pub fn train(
        &mut self,
        data: &Dataset<T>,
        steps: usize,
        mut on_step: impl FnMut(usize, &LossBundle) -> Result<()>,
    ) -> Result<()> {
        let schedule = self.schedule(data.len());
        for _ in 0..steps {
            let idx = schedule.for_step(self.step)?;
            let batch = data.gather(&idx);
            let step = self.step;
            let bundle = self.train_step(&batch)?;
            on_step(step, &bundle)?;
        }
        Ok(())
    }

    pub fn schedule(&self, len: usize) -> BatchSchedule {
        BatchSchedule { len, batch_size: self.cfg.batch_size, drop_last: self.cfg.drop_last, seed: self.cfg.seed }
    }
}

fn apply<T: Scalar>(store: &mut ParamStore<T>, opt: &mut Adam<T>, grads: &Gradients<T>, clip: f64, lr: f64) -> f64 {
    let mut g = grads.for_store(store);
    if g.iter().all(|x| x.is_none()) {
        return 0.0;
    }
    let norm = if clip > 0.0 { clip_grad_norm(&mut g, clip) } else { g.iter().flatten().map(|t| t.sq_norm().as_f64()).sum::<f64>().sqrt() };
    opt.step(store, &g, lr);
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-6).unwrap(), 1e-4);
        assert!((cosine_lr(100, 100, 1e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-4, 1e-6).unwrap() - (1e-4 + 1e-6) / 2.0).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 1e-4, 1e-6).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut shadow = ParamStore::<f64>::new();
        let id = shadow.add("w", Tensor::zeros(vec![3]));
        let mut params = ParamStore::<f64>::new();
        params.add("w", Tensor::ones(vec![3]));
        ema_update(&mut shadow, &params, 1.0).unwrap();
        assert_eq!(shadow.get(id).data(), &[0.0; 3]);
        ema_update(&mut shadow, &params, 0.9).unwrap();
        assert!(shadow.get(id).data().iter().all(|v| (v - 0.1).abs() < 1e-15));
        ema_update(&mut shadow, &params, 0.0).unwrap();
        assert_eq!(shadow.get(id).data(), &[1.0; 3]);
        let mut other = ParamStore::<f64>::new();
        other.add("v", Tensor::ones(vec![3]));
        assert!(ema_update(&mut shadow, &other, 0.5).is_err());
    }

    #[test]
    fn tiny_step_runs_and_is_finite() {
        let mut cfg = preset("tiny").unwrap();
        cfg.precision = crate::config::Precision::F64;
        cfg.steps = 4;
        let data = Dataset::<f64>::synthetic(16, cfg.image_size, cfg.num_classes, 0);
        let mut state = TrainState::<f64>::new(cfg).unwrap();
        let mut totals = Vec::new();
        state.train(&data, 2, |_, b| {
            totals.push(b.total);
            Ok(())
        })
        .unwrap();
        assert_eq!(state.step, 2);
        assert!(totals.iter().all(|t| t.is_finite()));
    }
}
