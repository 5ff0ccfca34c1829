//! Downstream segmentation: soft Jaccard loss, IoU, cosine annealing with
//! restarts and the fixed-budget U-Net fine-tuning loop.

use std::f64::consts::PI;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_labeled_pair, resize_pair, AugmentConfig};
use crate::data::{stack_images, Mask, SemiSupervisedDataset, SplitDatasets};
use crate::error::{ensure, Error, Result};
use crate::nets::{
    apply_bn_updates, build_encoder, build_unet, transfer_encoder_weights, unet_forward, DecoderConfig,
    EncoderConfig, ForwardCtx, NetworkWeights, BN_MOMENTUM,
};
use crate::optim::{Grads, Optimizer, OptimizerKind};
use crate::seeding::derive_rng;
use crate::tensor::Scalar;

pub const JACCARD_EPS: f64 = 1e-7;

/// Per-class soft IoU `(sum p t + eps) / (sum p + sum t - sum p t + eps)`,
/// summed over batch and pixels. `probs` is `B x C x H x W`, `target` holds
/// `B x H x W` class ids.
fn soft_iou_terms<T: Scalar>(probs: &[T], target: &[u8], shape: [usize; 4], eps: f64) -> Result<Vec<(T, T)>> {
    let [b, c, h, w] = shape;
    let hw = h * w;
    ensure(probs.len() == b * c * hw, || format!("probs length {} does not match {shape:?}", probs.len()))?;
    ensure(target.len() == b * hw, || format!("target length {} does not match {b}x{h}x{w}", target.len()))?;
    ensure(target.iter().all(|&t| (t as usize) < c), || format!("target ids must be < {c}"))?;
    let eps = T::from_f64(eps);
    let mut terms = Vec::with_capacity(c);
    for ch in 0..c {
        let (mut inter, mut sp, mut st) = (T::zero(), T::zero(), T::zero());
        for n in 0..b {
            let p = &probs[(n * c + ch) * hw..(n * c + ch + 1) * hw];
            for (&pi, &ti) in p.iter().zip(&target[n * hw..(n + 1) * hw]) {
                sp += pi;
                if ti as usize == ch {
                    inter += pi;
                    st += T::one();
                }
            }
        }
        terms.push((inter + eps, sp + st - inter + eps));
    }
    Ok(terms)
}

/// Mean soft IoU over classes.
pub fn soft_iou<T: Scalar>(probs: &[T], target: &[u8], shape: [usize; 4], eps: f64) -> Result<T> {
    let terms = soft_iou_terms(probs, target, shape, eps)?;
    let c = T::from_f64(terms.len() as f64);
    Ok(terms.iter().map(|&(n, u)| n / u).sum::<T>() / c)
}

/// `1 - soft_iou` and its gradient with respect to `probs`.
pub fn jaccard_loss_and_grad<T: Scalar>(
    probs: &[T],
    target: &[u8],
    shape: [usize; 4],
    eps: f64,
) -> Result<(T, Vec<T>)> {
    let terms = soft_iou_terms(probs, target, shape, eps)?;
    let [b, c, h, w] = shape;
    let hw = h * w;
    let inv_c = T::one() / T::from_f64(c as f64);
    let loss = T::one() - terms.iter().map(|&(n, u)| n / u).sum::<T>() * inv_c;
    let mut grad = vec![T::zero(); probs.len()];
    for (ch, &(num, u)) in terms.iter().enumerate() {
        // d(N/U)/dp = (t U - N (1 - t)) / U^2
        let on = -inv_c / u;
        let off = inv_c * num / (u * u);
        for n in 0..b {
            let g = &mut grad[(n * c + ch) * hw..(n * c + ch + 1) * hw];
            for (gi, &ti) in g.iter_mut().zip(&target[n * hw..(n + 1) * hw]) {
                *gi = if ti as usize == ch { on } else { off };
            }
        }
    }
    Ok((loss, grad))
}

pub fn jaccard_loss<T: Scalar>(probs: &[T], target: &[u8], shape: [usize; 4], eps: f64) -> Result<T> {
    jaccard_loss_and_grad(probs, target, shape, eps).map(|r| r.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IouAverage {
    Macro,
    PerClass,
}

#[derive(Clone, Debug, PartialEq)]
pub enum IouScore {
    Macro(f64),
    /// `None` for classes absent from both prediction and target.
    PerClass(Vec<Option<f64>>),
}

impl IouScore {
    pub fn macro_value(&self) -> Option<f64> {
        match self {
            IouScore::Macro(v) => Some(*v),
            IouScore::PerClass(_) => None,
        }
    }
}

/// Intersection and union pixel counts per class.
pub fn confusion_counts(pred: &[u8], target: &[u8], n_classes: usize) -> Vec<(u64, u64)> {
    let mut counts = vec![(0u64, 0u64); n_classes];
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p as usize, t as usize);
        if p == t {
            counts[p].0 += 1;
            counts[p].1 += 1;
        } else {
            counts[p].1 += 1;
            counts[t].1 += 1;
        }
    }
    counts
}

fn score_from_counts(counts: &[(u64, u64)], average: IouAverage) -> IouScore {
    let per: Vec<Option<f64>> =
        counts.iter().map(|&(i, u)| (u > 0).then(|| i as f64 / u as f64)).collect();
    match average {
        IouAverage::PerClass => IouScore::PerClass(per),
        IouAverage::Macro => {
            let present: Vec<f64> = per.iter().flatten().copied().collect();
            IouScore::Macro(if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 })
        }
    }
}

/// Hard IoU between label maps. Classes absent from both are excluded from
/// the macro average.
pub fn iou_score(pred: &[u8], target: &[u8], n_classes: usize, average: IouAverage) -> Result<IouScore> {
    ensure(pred.len() == target.len(), || "pred and target lengths differ".into())?;
    ensure(pred.iter().chain(target).all(|&v| (v as usize) < n_classes), || {
        format!("label ids must be < {n_classes}")
    })?;
    Ok(score_from_counts(&confusion_counts(pred, target, n_classes), average))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EncoderInit {
    Random,
    FromCheckpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    /// Step budget; `None` means 150 epochs over the full labeled set.
    pub total_steps: Option<u64>,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Annealing period; `None` splits the budget into `anneal_periods`.
    pub anneal_period_steps: Option<u64>,
    pub anneal_periods: u64,
    pub eval_every_steps: u64,
    pub encoder_init: EncoderInit,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Fine-tune encoder batch-norm layers (scale, shift and running stats).
    pub train_encoder_bn: bool,
    pub decoder: Option<DecoderConfig>,
    pub out_classes: usize,
    pub eval_batch_size: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            total_steps: None,
            batch_size: 8,
            lr_max: 1e-3,
            lr_min: 1e-5,
            anneal_period_steps: None,
            anneal_periods: 3,
            eval_every_steps: 20,
            encoder_init: EncoderInit::FromCheckpoint,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            train_encoder_bn: true,
            decoder: None,
            out_classes: 4,
            eval_batch_size: 16,
        }
    }
}

pub const EPOCHS_EQUIVALENT: u64 = 150;

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.lr_min > 0.0 && self.lr_min <= self.lr_max, || {
            format!("need 0 < lr_min <= lr_max, got {} / {}", self.lr_min, self.lr_max)
        })?;
        ensure(self.batch_size >= 1 && self.eval_batch_size >= 1, || "batch sizes must be >= 1".into())?;
        ensure(self.eval_every_steps >= 1, || "eval_every_steps must be >= 1".into())?;
        ensure(self.anneal_period_steps.is_none_or(|p| p >= 1) && self.anneal_periods >= 1, || {
            "anneal period must be >= 1".into()
        })?;
        ensure(self.out_classes >= 2, || "out_classes must be >= 2".into())
    }

    /// Step budget for a full labeled set of `labeled` slices.
    pub fn resolved_total_steps(&self, labeled: usize) -> u64 {
        self.total_steps
            .unwrap_or_else(|| EPOCHS_EQUIVALENT * (labeled.max(1) as u64).div_ceil(self.batch_size as u64))
    }

    pub fn resolved_period(&self, total: u64) -> u64 {
        self.anneal_period_steps.unwrap_or_else(|| total.div_ceil(self.anneal_periods).max(1))
    }

    pub fn decoder_for(&self, enc: &EncoderConfig) -> DecoderConfig {
        self.decoder.clone().unwrap_or_else(|| DecoderConfig::default_for(enc, self.out_classes))
    }
}

/// Cosine annealing restarting every `period` steps.
pub fn cosine_annealing_lr(step: u64, lr_max: f64, lr_min: f64, period: u64) -> f64 {
    let period = period.max(1);
    let t = (step % period) as f64 / period as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub steps: Vec<u64>,
    pub train_loss: Vec<f64>,
    pub eval_iou: Vec<f64>,
    pub eval_loss: Vec<f64>,
}

impl LearningCurve {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn metric(&self, name: &str) -> Option<&[f64]> {
        match name {
            "train_loss" => Some(&self.train_loss),
            "eval_iou" | "iou" => Some(&self.eval_iou),
            "eval_loss" => Some(&self.eval_loss),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub iou: f64,
}

fn bn_prefix_is_encoder(name: &str) -> bool {
    name.starts_with("encoder.")
}

/// Jaccard loss and macro IoU over every labeled slice of `ds` with
/// eval-mode batch norm. Both are pooled over the whole split.
pub fn evaluate(weights: &NetworkWeights, dec: &DecoderConfig, ds: &SemiSupervisedDataset, size: usize, batch: usize) -> Result<EvalMetrics> {
    let idx = ds.labeled_indices();
    ensure(!idx.is_empty(), || format!("{} split has no labeled slices", ds.split()))?;
    let enc = EncoderConfig::from_meta(&weights.meta);
    let c = dec.out_classes;
    let mut counts = vec![(0u64, 0u64); c];
    let mut soft = vec![(0.0f64, 0.0f64, 0.0f64); c];
    for chunk in idx.chunks(batch.max(1)) {
        let pairs: Vec<_> = chunk
            .iter()
            .map(|&i| {
                let s = ds.slice(i);
                let (img, m) = resize_pair(s.image(), s.mask(), size);
                (img, m.expect("labeled slice"))
            })
            .collect();
        let x = stack_images(pairs.iter().map(|p| &p.0));
        let target: Vec<u8> = pairs.iter().flat_map(|p| p.1.data.iter().copied()).collect();
        let mut ctx = ForwardCtx::new(&weights.params, false, false);
        let xin = ctx.input(x);
        let logits = unet_forward(&mut ctx, &enc, dec, xin);
        let probs = ctx.graph.softmax_channels(logits);
        let pv = ctx.graph.value(probs);
        let (b, hw) = (chunk.len(), size * size);
        let pd = pv.data();
        let mut pred = vec![0u8; b * hw];
        for n in 0..b {
            for s in 0..hw {
                let mut best = 0;
                for ch in 1..c {
                    if pd[(n * c + ch) * hw + s] > pd[(n * c + best) * hw + s] {
                        best = ch;
                    }
                }
                pred[n * hw + s] = best as u8;
                let t = target[n * hw + s] as usize;
                for (ch, acc) in soft.iter_mut().enumerate() {
                    let p = pd[(n * c + ch) * hw + s] as f64;
                    acc.1 += p;
                    if t == ch {
                        acc.0 += p;
                        acc.2 += 1.0;
                    }
                }
            }
        }
        for (acc, add) in counts.iter_mut().zip(confusion_counts(&pred, &target, c)) {
            acc.0 += add.0;
            acc.1 += add.1;
        }
    }
    let iou = score_from_counts(&counts, IouAverage::Macro).macro_value().unwrap_or(0.0);
    let mean_soft = soft.iter().map(|&(i, p, t)| (i + JACCARD_EPS) / (p + t - i + JACCARD_EPS)).sum::<f64>() / c as f64;
    Ok(EvalMetrics { loss: 1.0 - mean_soft, iou })
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub curve: LearningCurve,
    pub weights: NetworkWeights,
    /// U-Net at step 0, before any update.
    pub initial: NetworkWeights,
}

/// Builds the step-0 U-Net. The encoder comes from `init` or a fresh draw;
/// the decoder stream depends only on `seed`.
pub fn initial_unet(
    init: Option<&NetworkWeights>,
    enc_cfg: &EncoderConfig,
    cfg: &SegConfig,
    seed: u64,
) -> Result<(NetworkWeights, DecoderConfig)> {
    let mut single = enc_cfg.clone();
    single.in_channels = 1;
    let encoder = match (cfg.encoder_init, init) {
        (EncoderInit::FromCheckpoint, Some(w)) => {
            let mut dst = EncoderConfig::from_meta(&w.meta);
            dst.in_channels = 1;
            transfer_encoder_weights(w, &dst)?
        }
        (EncoderInit::FromCheckpoint, None) => {
            return Err(Error::Config("encoder_init is FROM_CHECKPOINT but no encoder was given".into()))
        }
        (EncoderInit::Random, _) => build_encoder(&single, seed, &mut derive_rng(seed, "finetune-encoder", &[]))?,
    };
    let dec = cfg.decoder_for(&EncoderConfig::from_meta(&encoder.meta));
    let unet = build_unet(&encoder, &dec, &mut derive_rng(seed, "finetune-decoder", &[]))?;
    Ok((unet, dec))
}

/// Fine-tunes a U-Net for exactly the configured step budget, cycling the
/// labeled `subset` of `data.train` and evaluating on `data.val` every
/// `eval_every_steps`.
pub fn finetune(
    init: Option<&NetworkWeights>,
    enc_cfg: &EncoderConfig,
    subset: &[usize],
    data: &SplitDatasets,
    cfg: &SegConfig,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    aug.validate()?;
    ensure(!subset.is_empty(), || "labeled subset is empty".into())?;
    let train = &data.train;
    for &i in subset {
        ensure(i < train.len() && train.slice(i).mask().is_some(), || format!("subset index {i} is not a labeled train slice"))?;
    }
    let (initial, dec) = initial_unet(init, enc_cfg, cfg, seed)?;
    let enc = EncoderConfig::from_meta(&initial.meta);
    ensure(aug.output_size % enc.total_stride() == 0, || {
        format!("augment output_size {} must be divisible by {}", aug.output_size, enc.total_stride())
    })?;
    let total = cfg.resolved_total_steps(train.labeled_indices().len());
    let period = cfg.resolved_period(total);
    let mut weights = initial.clone();
    let mut opt = Optimizer::new(cfg.optimizer, 0.9, cfg.weight_decay);
    let mut curve = LearningCurve::default();
    let mut order: Vec<usize> = Vec::new();
    let mut pass = 0u64;
    let mut cursor = 0usize;
    let (mut loss_acc, mut loss_n) = (0.0, 0usize);
    let size = aug.output_size;

    for step in 0..total {
        let mut rng = derive_rng(seed, "finetune-augment", &[step]);
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut masks: Vec<Mask> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = subset.to_vec();
                order.shuffle(&mut derive_rng(seed, "finetune-order", &[pass]));
                pass += 1;
                cursor = 0;
            }
            let s = train.slice(order[cursor]);
            cursor += 1;
            let (img, m) = augment_labeled_pair(s.image(), s.mask().expect("labeled"), aug, &mut rng)?;
            images.push(img);
            masks.push(m);
        }
        let x = stack_images(images.iter());
        let target: Vec<u8> = masks.iter().flat_map(|m| m.data.iter().copied()).collect();

        let mut ctx = ForwardCtx::new(&weights.params, true, true);
        let xin = ctx.input(x);
        let logits = unet_forward(&mut ctx, &enc, &dec, xin);
        let probs = ctx.graph.softmax_channels(logits);
        let shape = [cfg.batch_size, dec.out_classes, size, size];
        let (loss, grad) = jaccard_loss_and_grad(ctx.graph.value(probs).data(), &target, shape, JACCARD_EPS)?;
        if !loss.is_finite() {
            return Err(Error::TrainingAborted { step, reason: format!("non-finite Jaccard loss {loss}") });
        }
        let root = ctx.graph.loss(loss, vec![(probs, grad)]);
        let mut g = ctx.graph.backward(root);
        let mut grads: Grads = ctx.param_grads(&mut g);
        let mut bn = ctx.bn_updates();
        if !cfg.train_encoder_bn {
            grads.retain(|k, _| !(bn_prefix_is_encoder(k) && (k.ends_with(".scale") || k.ends_with(".shift"))));
            bn.retain(|(p, _)| !bn_prefix_is_encoder(p));
        }
        let lr = cosine_annealing_lr(step, cfg.lr_max, cfg.lr_min, period);
        opt.step(&mut weights.params, &grads, lr);
        apply_bn_updates(&mut weights.params, &bn, BN_MOMENTUM);
        loss_acc += loss as f64;
        loss_n += 1;

        if (step + 1) % cfg.eval_every_steps == 0 {
            let m = evaluate(&weights, &dec, &data.val, size, cfg.eval_batch_size)?;
            curve.steps.push(step + 1);
            curve.train_loss.push(loss_acc / loss_n as f64);
            curve.eval_iou.push(m.iou);
            curve.eval_loss.push(m.loss);
            debug!("finetune step {}: train {:.4} val loss {:.4} iou {:.4}", step + 1, loss_acc / loss_n as f64, m.loss, m.iou);
            loss_acc = 0.0;
            loss_n = 0;
        }
    }
    weights.meta.stage = "finetune".into();
    Ok(FinetuneOutput { curve, weights, initial })
}
