//! Token-order sensitivity: fresh generators trained on permuted code sequences
//! of a frozen tokenizer.
//!
//! One permutation is drawn per experiment and applied to every sequence.
//! Samples are mapped back to the original order before decoding.

use jointok_autograd::{Adam, Graph, ParamStore, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSchedule, Dataset};
use crate::error::{Error, Result};
use crate::evaluator::{generation_metrics, FeatureExtractor, GenMetrics, RealReference};
use crate::generator::{ar_accuracy, class_dropout, ntp_loss, sample, ArModel, Guidance, SampleOptions};
use crate::nn::{component_rng, Ctx, Init};
use crate::trainer::{ar_config, cosine_lr, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenOrder {
    Original,
    Reversed,
    /// one fixed permutation drawn from the seed
    Random(u64),
}

impl TokenOrder {
    /// Parses `original`, `reversed` or `random[:seed]`.
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "original" => Ok(TokenOrder::Original),
            "reversed" => Ok(TokenOrder::Reversed),
            "random" => Ok(TokenOrder::Random(0)),
            _ => match text.strip_prefix("random:").map(str::parse) {
                Some(Ok(seed)) => Ok(TokenOrder::Random(seed)),
                _ => Err(Error::InvalidValue {
                    key: "order".into(),
                    reason: format!("`{text}` is not original, reversed or random:<seed>"),
                }),
            },
        }
    }

    /// Stable identifier recorded in run manifests.
    pub fn id(&self) -> String {
        match self {
            TokenOrder::Original => "original".into(),
            TokenOrder::Reversed => "reversed".into(),
            TokenOrder::Random(s) => format!("random:{s}"),
        }
    }

    /// `perm[j]` is the original position placed at position `j`.
    pub fn permutation(&self, l: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..l).collect();
        match self {
            TokenOrder::Original => {}
            TokenOrder::Reversed => p.reverse(),
            TokenOrder::Random(seed) => p.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed)),
        }
        p
    }
}

/// Applies `perm` to every length-`perm.len()` sequence of row-major `ids`.
pub fn permute_sequences(ids: &[usize], perm: &[usize]) -> Vec<usize> {
    let l = perm.len();
    ids.chunks(l).flat_map(|s| perm.iter().map(move |&p| s[p])).collect()
}

/// Inverse of [`permute_sequences`].
pub fn unpermute_sequences(ids: &[usize], perm: &[usize]) -> Vec<usize> {
    let l = perm.len();
    let mut out = vec![0; ids.len()];
    for (b, s) in ids.chunks(l).enumerate() {
        for (j, &p) in perm.iter().enumerate() {
            out[b * l + p] = s[j];
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderingOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub num_samples: usize,
    pub temperature: f64,
}

impl OrderingOptions {
    pub fn from_config(cfg: &crate::config::TrainConfig, steps: usize) -> Self {
        Self {
            steps,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            lr_min: cfg.lr_min,
            seed: cfg.seed,
            num_samples: cfg.eval_samples,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderingReport {
    pub order: String,
    pub permutation: Vec<usize>,
    pub generation: GenMetrics,
    /// teacher-forcing accuracy on the permuted validation sequences
    pub ar_accuracy: f64,
    pub final_ntp: f64,
    pub tokenizer_unchanged: bool,
}

/// Encodes `data` with the EMA tokenizer of `state`; row-major `[N·L]` ids.
pub fn encode_corpus<T: Scalar>(state: &TrainState<T>, data: &Dataset<T>) -> Result<Vec<usize>> {
    let view = state.tokenizer_view(true);
    let mut ids = Vec::with_capacity(data.len() * view.num_tokens());
    for start in (0..data.len()).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(data.len())).collect();
        ids.extend(view.encode(&data.gather(&idx).pixels)?.ids);
    }
    Ok(ids)
}

fn teacher_forcing_accuracy<T: Scalar>(model: &ArModel, store: &ParamStore<T>, ids: &[usize], labels: &[usize]) -> Result<f64> {
    let (l, k) = (model.cfg.seq_len, model.cfg.vocab);
    let mut hits = 0.0;
    for (chunk, lab) in ids.chunks(64 * l).zip(labels.chunks(64)) {
        let g = Graph::inference();
        let cx = Ctx::frozen(&g, store);
        let ind = g.constant(Tensor::one_hot(chunk, k).reshape(vec![lab.len(), l, k]));
        let pred = model.forward_teacher_forcing(&cx, ind, lab, None)?;
        hits += ar_accuracy(&pred.logits.value(), chunk) * chunk.len() as f64;
    }
    Ok(hits / ids.len() as f64)
}

/// Trains a fresh generator on permuted codes of the frozen tokenizer and scores its samples.
pub fn run_ordering_experiment<T: Scalar>(
    state: &TrainState<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    order: TokenOrder,
    opts: &OrderingOptions,
    extractor: &FeatureExtractor<T>,
    reference: &RealReference,
) -> Result<OrderingReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("ordering corpus"));
    }
    let cfg = &state.cfg;
    let before = state.ema_tok.clone();
    let l = cfg.num_tokens;
    let perm = order.permutation(l);
    let train_ids = permute_sequences(&encode_corpus(state, train)?, &perm);
    let val_ids = permute_sequences(&encode_corpus(state, val)?, &perm);

    let mut store = ParamStore::<T>::new();
    let model = ArModel::new(&mut Init::new(&mut store, &mut component_rng(opts.seed, "ordering-ar")), ar_config(cfg, cfg.ar_layers));
    let mut opt = Adam::new(&store, cfg.beta1, cfg.beta2_ar, 1e-8);
    let schedule = BatchSchedule { len: train.len(), batch_size: opts.batch_size.min(train.len()), drop_last: true, seed: opts.seed };
    let k = cfg.codebook_size;
    let mut final_ntp = f64::NAN;
    for step in 0..opts.steps {
        let idx = schedule.for_step(step)?;
        let ids: Vec<usize> = idx.iter().flat_map(|&i| train_ids[i * l..(i + 1) * l].iter().copied()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x04d3);
        rng.set_stream(step as u64);
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let labels = class_dropout(&labels, cfg.class_dropout, model.cfg.null_class(), &mut rng);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let ind = g.constant(Tensor::one_hot(&ids, k).reshape(vec![idx.len(), l, k]));
        let pred = model.forward_teacher_forcing(&cx, ind, &labels, None)?;
        let loss = ntp_loss(pred.logits, &ids);
        final_ntp = loss.item().as_f64();
        if !final_ntp.is_finite() {
            return Err(Error::NonFinite { term: "ntp".into() });
        }
        let grads = g.backward(loss);
        let mut gv = grads.for_store(&store);
        jointok_autograd::clip_grad_norm(&mut gv, cfg.grad_clip);
        opt.step(&mut store, &gv, cosine_lr(step, opts.steps, opts.lr, opts.lr_min)?);
    }

    let ar_acc = teacher_forcing_accuracy(&model, &store, &val_ids, &val.labels)?;
    let labels = crate::evaluator::balanced_labels(opts.num_samples, cfg.num_classes);
    let view = state.tokenizer_view(true);
    let sample_opts = SampleOptions { temperature: opts.temperature, greedy: false, seed: opts.seed, use_cache: true };
    let mut images = Vec::new();
    for (i, chunk) in labels.chunks(64).enumerate() {
        let o = SampleOptions { seed: opts.seed.wrapping_add(i as u64), ..sample_opts.clone() };
        let seqs: Vec<usize> = sample(&model, &store, chunk, &o, &Guidance::None)?.into_iter().flatten().collect();
        images.push(view.decode_ids(&unpermute_sequences(&seqs, &perm), l)?);
    }
    let refs: Vec<&Tensor<T>> = images.iter().collect();
    let generation = generation_metrics(&Tensor::concat(&refs, 0), &labels, extractor, reference)?;
    Ok(OrderingReport {
        order: order.id(),
        permutation: perm,
        generation,
        ar_accuracy: ar_acc,
        final_ntp,
        tokenizer_unchanged: before.bit_identical(&state.ema_tok),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations() {
        assert_eq!(TokenOrder::Reversed.permutation(4), vec![3, 2, 1, 0]);
        let p = TokenOrder::Random(5).permutation(16);
        assert_eq!(p, TokenOrder::Random(5).permutation(16));
        let mut sorted = p.clone();
        sorted.sort();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
        let ids: Vec<usize> = (0..32).collect();
        assert_eq!(unpermute_sequences(&permute_sequences(&ids, &p), &p), ids);
        assert_eq!(permute_sequences(&ids, &TokenOrder::Original.permutation(16)), ids);
        assert_eq!(TokenOrder::parse("random:7").unwrap(), TokenOrder::Random(7));
        assert_eq!(TokenOrder::parse("reversed").unwrap().id(), "reversed");
        assert!(TokenOrder::parse("sideways").is_err());
    }
}
