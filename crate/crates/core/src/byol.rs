//! BYOL pretraining: an online encoder + projector + predictor regresses the
//! normalized projection of a slowly moving target copy on the other view.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair, AugmentConfig, ViewPair};
use crate::autodiff::BatchStats;
use crate::data::{stack_images, Image, SemiSupervisedDataset};
use crate::error::{ensure, Error, Result};
use crate::nets::{
    apply_bn_updates, build_byol_heads, build_encoder, mlp_forward, transfer_encoder_weights, EncoderConfig,
    ForwardCtx, HeadConfig, NetworkWeights, Params, BN_MOMENTUM,
};
use crate::optim::{cosine_decay, Grads, Optimizer};
use crate::seeding::derive_rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TauSchedule {
    Constant,
    CosineToOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ByolConfig {
    pub tau_base: f64,
    pub tau_schedule: TauSchedule,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_every_epoch: bool,
    pub heads: HeadConfig,
}

impl Default for ByolConfig {
    fn default() -> Self {
        Self {
            tau_base: 0.99,
            tau_schedule: TauSchedule::CosineToOne,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 25,
            batch_size: 32,
            checkpoint_every_epoch: true,
            heads: HeadConfig::default(),
        }
    }
}

impl ByolConfig {
    pub fn validate(&self) -> Result<()> {
        ensure((0.0..=1.0).contains(&self.tau_base), || format!("tau_base {} not in [0,1]", self.tau_base))?;
        ensure(self.learning_rate >= 0.0, || "learning_rate must be >= 0".into())?;
        ensure(self.batch_size >= 2, || "batch_size must be >= 2 (batch norm in the heads)".into())?;
        self.heads.validate()
    }
}

/// EMA momentum at `step` of `total_steps`.
pub fn tau_at(step: u64, total_steps: u64, cfg: &ByolConfig) -> f64 {
    match cfg.tau_schedule {
        TauSchedule::Constant => cfg.tau_base,
        TauSchedule::CosineToOne => {
            if total_steps == 0 {
                return cfg.tau_base;
            }
            let t = step.min(total_steps) as f64 / total_steps as f64;
            1.0 - (1.0 - cfg.tau_base) * ((PI * t).cos() + 1.0) / 2.0
        }
    }
}

fn unit_rows<T: Scalar>(x: &[T], dim: usize, what: &str) -> Result<(Vec<T>, Vec<T>)> {
    let mut out = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / dim);
    for (b, row) in x.chunks(dim).enumerate() {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::NumericGuard(format!("{what} row {b} has norm {:?}", n)));
        }
        out.extend(row.iter().map(|&v| v / n));
        norms.push(n);
    }
    Ok((out, norms))
}

/// Symmetrized normalized MSE and its gradients with respect to `q1` and
/// `q2`. The `z` inputs are constants.
pub fn byol_loss_and_grads<T: Scalar>(
    q1: &[T],
    z2: &[T],
    q2: &[T],
    z1: &[T],
    dim: usize,
) -> Result<(T, Vec<T>, Vec<T>)> {
    ensure(dim >= 1 && !q1.is_empty() && q1.len() % dim == 0, || "byol_loss: bad dimensions".into())?;
    ensure([z2.len(), q2.len(), z1.len()].iter().all(|&l| l == q1.len()), || {
        "byol_loss: all inputs must share a shape".into()
    })?;
    let batch = q1.len() / dim;
    let scale = T::one() / T::from_f64(batch as f64);
    let mut total = T::zero();
    let mut half = |q: &[T], z: &[T], qn: &str, zn: &str| -> Result<Vec<T>> {
        let (qh, qnorm) = unit_rows(q, dim, qn)?;
        let (zh, _) = unit_rows(z, dim, zn)?;
        let mut grad = vec![T::zero(); q.len()];
        for b in 0..batch {
            let r = b * dim..(b + 1) * dim;
            let (qb, zb) = (&qh[r.clone()], &zh[r.clone()]);
            total += qb.iter().zip(zb).map(|(&a, &c)| (a - c) * (a - c)).sum::<T>();
            let dot = qb.iter().zip(zb).map(|(&a, &c)| a * c).sum::<T>();
            // d/dq (2 - 2 q.z/|q|) = -(2/|q|)(z - (q^.z) q^)
            let k = -T::from_f64(2.0) * scale / qnorm[b];
            for (g, (&a, &c)) in grad[r].iter_mut().zip(qb.iter().zip(zb)) {
                *g = k * (c - dot * a);
            }
        }
        Ok(grad)
    };
    let g1 = half(q1, z2, "q1", "z2")?;
    let g2 = half(q2, z1, "q2", "z1")?;
    Ok((total * scale, g1, g2))
}

pub fn byol_loss<T: Scalar>(q1: &[T], z2: &[T], q2: &[T], z1: &[T], dim: usize) -> Result<T> {
    byol_loss_and_grads(q1, z2, q2, z1, dim).map(|r| r.0)
}

fn shared_names(online: &Params<f32>) -> BTreeSet<&str> {
    online.keys().map(String::as_str).filter(|k| !k.starts_with("predictor.")).collect()
}

/// `xi <- tau xi + (1 - tau) theta` over every encoder and projector entry,
/// batch-norm buffers included.
pub fn ema_update(online: &NetworkWeights, target: &NetworkWeights, tau: f64) -> Result<NetworkWeights> {
    let shared = shared_names(&online.params);
    let tnames: BTreeSet<&str> = target.params.keys().map(String::as_str).collect();
    if shared != tnames {
        let missing: Vec<_> = shared.difference(&tnames).take(10).collect();
        let extra: Vec<_> = tnames.difference(&shared).take(10).collect();
        return Err(Error::Contract(format!(
            "online/target name sets differ: missing in target {missing:?}, unexpected in target {extra:?}"
        )));
    }
    let mut out = target.clone();
    for (name, t) in out.params.iter_mut() {
        let o = &online.params[name];
        if o.shape() != t.shape() {
            return Err(Error::Contract(format!("{name}: shape {:?} vs {:?}", o.shape(), t.shape())));
        }
        for (x, &th) in t.data_mut().iter_mut().zip(o.data()) {
            *x = (tau * *x as f64 + (1.0 - tau) * th as f64) as f32;
        }
    }
    Ok(out)
}

pub struct OnlineStep<T> {
    pub loss: T,
    pub grads: std::collections::BTreeMap<String, Vec<T>>,
    pub bn_updates: Vec<(String, BatchStats<T>)>,
}

fn project<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, enc: &EncoderConfig, x: Tensor<T>) -> crate::autodiff::NodeId {
    let x = ctx.input(x);
    let e = enc.forward(ctx, x).embedding;
    mlp_forward(ctx, "projector", e)
}

/// Target projections of both views (train-mode batch norm, no gradients).
pub fn target_projections<T: Scalar>(
    target: &Params<T>,
    enc: &EncoderConfig,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
) -> (Vec<T>, Vec<T>) {
    let mut ctx = ForwardCtx::new(target, true, false);
    let z1 = project(&mut ctx, enc, x1.clone());
    let z2 = project(&mut ctx, enc, x2.clone());
    (ctx.graph.value(z1).data().to_vec(), ctx.graph.value(z2).data().to_vec())
}

/// Online forward/backward given constant target projections.
pub fn online_step<T: Scalar>(
    online: &Params<T>,
    enc: &EncoderConfig,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    z1: &[T],
    z2: &[T],
) -> Result<OnlineStep<T>> {
    let mut ctx = ForwardCtx::new(online, true, true);
    let p1 = project(&mut ctx, enc, x1.clone());
    let q1 = mlp_forward(&mut ctx, "predictor", p1);
    let p2 = project(&mut ctx, enc, x2.clone());
    let q2 = mlp_forward(&mut ctx, "predictor", p2);
    let dim = ctx.graph.value(q1).shape()[1];
    let (loss, g1, g2) =
        byol_loss_and_grads(ctx.graph.value(q1).data(), z2, ctx.graph.value(q2).data(), z1, dim)?;
    let root = ctx.graph.loss(loss, vec![(q1, g1), (q2, g2)]);
    let mut grads = ctx.graph.backward(root);
    Ok(OnlineStep { loss, grads: ctx.param_grads(&mut grads), bn_updates: ctx.bn_updates() })
}

pub struct ByolState {
    /// Encoder, projector and predictor.
    pub online: NetworkWeights,
    /// Encoder and projector only.
    pub target: NetworkWeights,
    pub tau: f64,
    pub step: u64,
    pub total_steps: u64,
    optimizer: Optimizer,
}

impl ByolState {
    /// Online network from `encoder` plus fresh heads; target is a copy of
    /// the online encoder and projector.
    pub fn new<R: rand::Rng + ?Sized>(
        encoder: &NetworkWeights,
        cfg: &ByolConfig,
        total_steps: u64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let enc = EncoderConfig::from_meta(&encoder.meta);
        let (projector, predictor) = build_byol_heads(enc.embedding_dim(), &cfg.heads, rng)?;
        let mut online = NetworkWeights { params: encoder.subset("encoder"), meta: encoder.meta.clone() };
        online.params.extend(projector);
        let mut target = online.clone();
        online.params.extend(predictor);
        target.meta.stage = "byol-target".into();
        Ok(Self {
            online,
            target,
            tau: tau_at(0, total_steps, cfg),
            step: 0,
            total_steps,
            optimizer: Optimizer::sgd(cfg.momentum, cfg.weight_decay),
        })
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::from_meta(&self.online.meta)
    }

    pub fn online_encoder(&self) -> NetworkWeights {
        NetworkWeights { params: self.online.subset("encoder"), meta: self.online.meta.clone() }
    }

    pub fn lr(&self, cfg: &ByolConfig) -> f64 {
        cosine_decay(cfg.learning_rate, self.step, self.total_steps)
    }
}

/// One optimizer step on the online branch followed by the EMA update of the
/// target. Returns the loss.
pub fn byol_train_step(state: &mut ByolState, batch: &[ViewPair], cfg: &ByolConfig) -> Result<f64> {
    ensure(batch.len() >= 2, || format!("batch size {} < 2", batch.len()))?;
    let enc = state.encoder_config();
    let x1 = stack_images(batch.iter().map(|v| &v.view1));
    let x2 = stack_images(batch.iter().map(|v| &v.view2));
    let (z1, z2) = target_projections(&state.target.params, &enc, &x1, &x2);
    let out = online_step(&state.online.params, &enc, &x1, &x2, &z1, &z2)?;
    let loss = out.loss as f64;
    let grads_finite = out.grads.values().all(|g| g.iter().all(|v| v.is_finite()));
    if !loss.is_finite() || !grads_finite {
        return Err(Error::TrainingAborted {
            step: state.step,
            reason: format!(
                "non-finite loss or gradient (loss {loss}, tau {:.6}, lr {:.6e}, gradients finite: {grads_finite})",
                state.tau,
                state.lr(cfg)
            ),
        });
    }
    let grads: Grads = out.grads;
    let lr = state.lr(cfg);
    state.optimizer.step(&mut state.online.params, &grads, lr);
    apply_bn_updates(&mut state.online.params, &out.bn_updates, BN_MOMENTUM);
    state.tau = tau_at(state.step, state.total_steps, cfg);
    state.target = ema_update(&state.online, &state.target, state.tau)?;
    state.step += 1;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub tau: f64,
    pub learning_rate: f64,
}

pub struct PretrainOutput {
    pub encoder: NetworkWeights,
    /// Online encoder after each epoch, `meta.epoch` = 1..=epochs.
    pub checkpoints: Vec<NetworkWeights>,
    pub history: Vec<LossRecord>,
}

/// Number of optimizer steps per epoch over `n` slices (last partial batch
/// dropped).
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    let bs = batch_size.min(n);
    if bs == 0 {
        0
    } else {
        n / bs
    }
}

/// BYOL over every slice of `dataset`, labeled or not. Starts from
/// `init_encoder` (channel-adapted if needed) or a fresh `enc_cfg` encoder.
pub fn pretrain(
    dataset: &SemiSupervisedDataset,
    cfg: &ByolConfig,
    aug: &AugmentConfig,
    enc_cfg: &EncoderConfig,
    init_encoder: Option<&NetworkWeights>,
    seed: u64,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    aug.validate()?;
    ensure(dataset.len() >= 2, || format!("pretraining needs at least 2 slices, got {}", dataset.len()))?;
    let encoder = match init_encoder {
        Some(w) => {
            let mut dst = EncoderConfig::from_meta(&w.meta);
            dst.in_channels = 1;
            transfer_encoder_weights(w, &dst)?
        }
        None => {
            let mut c = enc_cfg.clone();
            c.in_channels = 1;
            build_encoder(&c, seed, &mut derive_rng(seed, "byol-encoder", &[]))?
        }
    };
    let enc = EncoderConfig::from_meta(&encoder.meta);
    ensure(aug.output_size % enc.total_stride() == 0, || {
        format!("augment output_size {} must be divisible by {}", aug.output_size, enc.total_stride())
    })?;
    if cfg.epochs == 0 {
        return Ok(PretrainOutput { encoder, checkpoints: Vec::new(), history: Vec::new() });
    }

    let n = dataset.len();
    let bs = cfg.batch_size.min(n);
    let per_epoch = steps_per_epoch(n, cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as u64;
    let mut state = ByolState::new(&encoder, cfg, total, &mut derive_rng(seed, "byol-heads", &[]))?;
    let mut history = Vec::with_capacity(total as usize);
    let mut checkpoints = Vec::new();
    info!("byol: {n} slices, {per_epoch} steps/epoch, {} epochs", cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(seed, "byol-order", &[epoch as u64]));
        let mut epoch_loss = 0.0;
        for (j, chunk) in order.chunks_exact(bs).enumerate() {
            let mut rng = derive_rng(seed, "byol-augment", &[epoch as u64, j as u64]);
            let batch = chunk
                .iter()
                .map(|&i| make_view_pair(dataset.slice(i).image(), aug, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let lr = state.lr(cfg);
            let step = state.step;
            let loss = byol_train_step(&mut state, &batch, cfg)?;
            epoch_loss += loss;
            history.push(LossRecord { step, epoch: epoch + 1, loss, tau: state.tau, learning_rate: lr });
        }
        debug!("byol epoch {}: mean loss {:.5}", epoch + 1, epoch_loss / per_epoch as f64);
        if cfg.checkpoint_every_epoch {
            let mut ck = state.online_encoder();
            ck.meta.epoch = (epoch + 1) as u32;
            ck.meta.stage = "byol".into();
            checkpoints.push(ck);
        }
    }
    let mut encoder = state.online_encoder();
    encoder.meta.epoch = cfg.epochs as u32;
    encoder.meta.stage = "byol".into();
    Ok(PretrainOutput { encoder, checkpoints, history })
}

/// Mean over dimensions of the batch standard deviation of L2-normalized
/// embeddings (eval-mode batch norm). Near zero means collapse.
pub fn embedding_spread(encoder: &NetworkWeights, images: &[&Image]) -> Result<f64> {
    ensure(images.len() >= 2, || "need at least 2 images".into())?;
    let enc = EncoderConfig::from_meta(&encoder.meta);
    let mut ctx = ForwardCtx::new(&encoder.params, false, false);
    let x = ctx.input(stack_images(images.iter().copied()));
    let e = enc.forward(&mut ctx, x).embedding;
    let dim = enc.embedding_dim();
    let (unit, _) = unit_rows(ctx.graph.value(e).data(), dim, "embedding")?;
    let b = images.len() as f64;
    let mut total = 0.0;
    for d in 0..dim {
        let col: Vec<f64> = unit.iter().skip(d).step_by(dim).map(|&v| v as f64).collect();
        let mean = col.iter().sum::<f64>() / b;
        total += (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0)).sqrt();
    }
    Ok(total / dim as f64)
}
