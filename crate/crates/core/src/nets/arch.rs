//! Encoder, decoder and BYOL head architectures.
//!
//! Every architecture is described twice from the same naming helpers: a
//! parameter listing (name and shape, used for construction and name-set
//! validation) and a forward pass over the autodiff tape. Parameter names
//! follow `module.stage.block.layer.kind`, which is what makes weights
//! transferable between independently constructed networks.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Gradients, Graph, NodeId};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::init::init_param;
use super::weights::{is_trainable, NetworkWeights, Params, WeightsMeta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    Tiny,
    Resnet50,
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderVariant::Tiny => "tiny",
            EncoderVariant::Resnet50 => "resnet50",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// TINY only: output width of each stride-2 stage. The embedding has the
    /// width of the last stage.
    #[serde(default = "default_tiny_widths")]
    pub stage_widths: Vec<usize>,
}

fn default_in_channels() -> usize {
    1
}

fn default_tiny_widths() -> Vec<usize> {
    vec![8, 16, 32]
}

const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const RESNET50_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const RESNET50_EXPANSION: usize = 4;

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::tiny(default_tiny_widths(), 1)
    }
}

impl EncoderConfig {
    pub fn tiny(widths: Vec<usize>, in_channels: usize) -> Self {
        Self { variant: EncoderVariant::Tiny, in_channels, stage_widths: widths }
    }

    pub fn resnet50(in_channels: usize) -> Self {
        Self { variant: EncoderVariant::Resnet50, in_channels, stage_widths: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(matches!(self.in_channels, 1 | 3), || {
            format!("encoder in_channels must be 1 or 3, got {}", self.in_channels)
        })?;
        if self.variant == EncoderVariant::Tiny {
            ensure(self.stage_widths.len() >= 3, || {
                format!("TINY encoder needs at least 3 stages, got {}", self.stage_widths.len())
            })?;
            ensure(self.stage_widths.iter().all(|&w| w >= 1), || "stage widths must be >= 1".into())?;
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::Tiny => *self.stage_widths.last().expect("validated TINY config"),
            EncoderVariant::Resnet50 => RESNET50_WIDTHS[3] * RESNET50_EXPANSION,
        }
    }

    /// Channels of each feature map handed to the decoder, shallow to deep.
    pub fn feature_channels(&self) -> Vec<usize> {
        match self.variant {
            EncoderVariant::Tiny => self.stage_widths.clone(),
            EncoderVariant::Resnet50 => {
                let mut v = vec![64];
                v.extend(RESNET50_WIDTHS.iter().map(|w| w * RESNET50_EXPANSION));
                v
            }
        }
    }

    /// Total downsampling factor of the deepest feature map.
    pub fn total_stride(&self) -> usize {
        1 << self.feature_channels().len()
    }

    pub fn first_conv_name(&self) -> &'static str {
        match self.variant {
            EncoderVariant::Tiny => "encoder.stage1.block0.conv.weight",
            EncoderVariant::Resnet50 => "encoder.stem.block0.conv.weight",
        }
    }

    /// Reconstructs the architecture recorded in weight metadata.
    pub fn from_meta(meta: &WeightsMeta) -> Self {
        Self {
            variant: meta.variant,
            in_channels: meta.input_channels,
            stage_widths: meta.stage_widths.clone(),
        }
    }

    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        match self.variant {
            EncoderVariant::Tiny => {
                let mut cin = self.in_channels;
                for (s, &w) in self.stage_widths.iter().enumerate() {
                    for b in 0..2 {
                        let prefix = format!("encoder.stage{}.block{b}", s + 1);
                        push_conv_bn(&mut specs, &prefix, "conv", "bn", [w, cin, 3, 3]);
                        cin = w;
                    }
                }
            }
            EncoderVariant::Resnet50 => {
                push_conv_bn(&mut specs, "encoder.stem.block0", "conv", "bn", [64, self.in_channels, 7, 7]);
                let mut cin = 64;
                for (l, (&blocks, &width)) in RESNET50_BLOCKS.iter().zip(&RESNET50_WIDTHS).enumerate() {
                    let cout = width * RESNET50_EXPANSION;
                    for b in 0..blocks {
                        let prefix = format!("encoder.layer{}.block{b}", l + 1);
                        push_conv_bn(&mut specs, &prefix, "conv1", "bn1", [width, cin, 1, 1]);
                        push_conv_bn(&mut specs, &prefix, "conv2", "bn2", [width, width, 3, 3]);
                        push_conv_bn(&mut specs, &prefix, "conv3", "bn3", [cout, width, 1, 1]);
                        if b == 0 {
                            push_conv_bn(&mut specs, &prefix, "downsample", "downsample_bn", [cout, cin, 1, 1]);
                        }
                        cin = cout;
                    }
                }
            }
        }
        specs
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, x: NodeId) -> EncoderOutput {
        let mut features = Vec::new();
        let mut h = x;
        match self.variant {
            EncoderVariant::Tiny => {
                for s in 0..self.stage_widths.len() {
                    for b in 0..2 {
                        let prefix = format!("encoder.stage{}.block{b}", s + 1);
                        let stride = if b == 0 { 2 } else { 1 };
                        h = ctx.conv_bn_relu(h, &prefix, "conv", "bn", stride, 1);
                    }
                    features.push(h);
                }
            }
            EncoderVariant::Resnet50 => {
                h = ctx.conv_bn_relu(h, "encoder.stem.block0", "conv", "bn", 2, 3);
                features.push(h);
                h = ctx.graph.max_pool3x3s2(h);
                for (l, &blocks) in RESNET50_BLOCKS.iter().enumerate() {
                    for b in 0..blocks {
                        let prefix = format!("encoder.layer{}.block{b}", l + 1);
                        let stride = if b == 0 && l > 0 { 2 } else { 1 };
                        let y = ctx.conv_bn_relu(h, &prefix, "conv1", "bn1", 1, 0);
                        let y = ctx.conv_bn_relu(y, &prefix, "conv2", "bn2", stride, 1);
                        let y = ctx.conv(y, &format!("{prefix}.conv3"), 1, 0, false);
                        let y = ctx.bn(y, &format!("{prefix}.bn3"));
                        let shortcut = if b == 0 {
                            let s = ctx.conv(h, &format!("{prefix}.downsample"), stride, 0, false);
                            ctx.bn(s, &format!("{prefix}.downsample_bn"))
                        } else {
                            h
                        };
                        let sum = ctx.graph.add(y, shortcut);
                        h = ctx.graph.relu(sum);
                    }
                    features.push(h);
                }
            }
        }
        let embedding = ctx.graph.global_avg_pool(h);
        EncoderOutput { embedding, features }
    }
}

fn push_conv_bn(
    specs: &mut Vec<(String, Vec<usize>)>,
    prefix: &str,
    conv: &str,
    bn: &str,
    shape: [usize; 4],
) {
    specs.push((format!("{prefix}.{conv}.weight"), shape.to_vec()));
    push_bn(specs, &format!("{prefix}.{bn}"), shape[0]);
}

fn push_bn(specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize) {
    for kind in ["scale", "shift", "running_mean", "running_var"] {
        specs.push((format!("{prefix}.{kind}"), vec![c]));
    }
}

pub struct EncoderOutput {
    pub embedding: NodeId,
    /// Feature maps at strides 2, 4, 8, ... (shallow to deep).
    pub features: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsampling {
    #[default]
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Output channels of each decoder stage, deep to shallow.
    pub stage_channels: Vec<usize>,
    #[serde(default)]
    pub upsampling: Upsampling,
    #[serde(default = "default_convs_per_stage")]
    pub convs_per_stage: usize,
    #[serde(default = "default_out_classes")]
    pub out_classes: usize,
}

fn default_convs_per_stage() -> usize {
    2
}

fn default_out_classes() -> usize {
    4
}

impl DecoderConfig {
    /// Default decoder for an encoder: TINY mirrors its widths, RESNET50
    /// uses (256, 128, 64, 32, 16).
    pub fn default_for(enc: &EncoderConfig, out_classes: usize) -> Self {
        let stage_channels = match enc.variant {
            EncoderVariant::Resnet50 => vec![256, 128, 64, 32, 16],
            EncoderVariant::Tiny => {
                let f = enc.feature_channels();
                let k = f.len();
                (0..k).map(|i| if i + 1 < k { f[k - 2 - i] } else { f[0] }).collect()
            }
        };
        Self { stage_channels, upsampling: Upsampling::Nearest, convs_per_stage: 2, out_classes }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        ensure(self.out_classes >= 2, || format!("out_classes must be >= 2, got {}", self.out_classes))?;
        ensure(self.convs_per_stage >= 1, || "convs_per_stage must be >= 1".into())?;
        let skips = enc.feature_channels().len();
        ensure(self.stage_channels.len() == skips, || {
            format!(
                "decoder has {} stages but the encoder provides {} feature maps",
                self.stage_channels.len(),
                skips
            )
        })
    }

    pub fn param_specs(&self, enc: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let feats = enc.feature_channels();
        let k = feats.len();
        let mut specs = Vec::new();
        let mut cin = feats[k - 1];
        for (i, &cout) in self.stage_channels.iter().enumerate() {
            if i + 1 < k {
                cin += feats[k - 2 - i];
            }
            for b in 0..self.convs_per_stage {
                let prefix = format!("decoder.stage{i}.block{b}");
                push_conv_bn(&mut specs, &prefix, "conv", "bn", [cout, cin, 3, 3]);
                cin = cout;
            }
        }
        specs.push(("decoder.head.block0.conv.weight".into(), vec![self.out_classes, cin, 3, 3]));
        specs.push(("decoder.head.block0.conv.bias".into(), vec![self.out_classes]));
        specs
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut ForwardCtx<'_, T>, features: &[NodeId]) -> NodeId {
        let k = features.len();
        let mut h = features[k - 1];
        for i in 0..self.stage_channels.len() {
            h = ctx.graph.upsample2x(h);
            if i + 1 < k {
                h = ctx.graph.concat_channels(h, features[k - 2 - i]);
            }
            for b in 0..self.convs_per_stage {
                h = ctx.conv_bn_relu(h, &format!("decoder.stage{i}.block{b}"), "conv", "bn", 1, 1);
            }
        }
        ctx.conv(h, "decoder.head.block0.conv", 1, 1, true)
    }
}

/// Projector and predictor sizes; each head is
/// linear -> batch norm -> rectifier -> linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub predictor_hidden: usize,
    pub predictor_out: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { projector_hidden: 128, projector_out: 32, predictor_hidden: 128, predictor_out: 32 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(
            [self.projector_hidden, self.projector_out, self.predictor_hidden, self.predictor_out]
                .iter()
                .all(|&d| d >= 1),
            || "head dimensions must be >= 1".into(),
        )?;
        ensure(self.predictor_out == self.projector_out, || {
            format!(
                "predictor out_dim {} must equal projector out_dim {}",
                self.predictor_out, self.projector_out
            )
        })
    }

    pub fn projector_specs(&self, embedding_dim: usize) -> Vec<(String, Vec<usize>)> {
        mlp_specs("projector", embedding_dim, self.projector_hidden, self.projector_out)
    }

    pub fn predictor_specs(&self) -> Vec<(String, Vec<usize>)> {
        mlp_specs("predictor", self.projector_out, self.predictor_hidden, self.predictor_out)
    }
}

fn mlp_specs(module: &str, input: usize, hidden: usize, out: usize) -> Vec<(String, Vec<usize>)> {
    let mut specs = vec![
        (format!("{module}.mlp.block0.linear.weight"), vec![hidden, input]),
        (format!("{module}.mlp.block0.linear.bias"), vec![hidden]),
    ];
    push_bn(&mut specs, &format!("{module}.mlp.block0.bn"), hidden);
    specs.push((format!("{module}.mlp.block1.linear.weight"), vec![out, hidden]));
    specs.push((format!("{module}.mlp.block1.linear.bias"), vec![out]));
    specs
}

/// Forward pass of a projector or predictor MLP.
pub fn mlp_forward<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, module: &str, x: NodeId) -> NodeId {
    let h = ctx.linear(x, &format!("{module}.mlp.block0.linear"));
    let h = ctx.bn(h, &format!("{module}.mlp.block0.bn"));
    let h = ctx.graph.relu(h);
    ctx.linear(h, &format!("{module}.mlp.block1.linear"))
}

/// Freshly initialized parameters for a listing, drawn in listing order.
pub fn init_params<R: Rng + ?Sized>(specs: &[(String, Vec<usize>)], rng: &mut R) -> Params<f32> {
    let mut out = BTreeMap::new();
    for (name, shape) in specs {
        out.insert(name.clone(), init_param(name, shape, rng));
    }
    out
}

/// Compares a parameter map against an expected listing.
pub fn check_name_set(params: &Params<f32>, specs: &[(String, Vec<usize>)], prefix: &str) -> NameSetDiff {
    let expected: BTreeMap<&str, &Vec<usize>> = specs.iter().map(|(n, s)| (n.as_str(), s)).collect();
    let p = format!("{prefix}.");
    let mut diff = NameSetDiff::default();
    for (name, shape) in &expected {
        match params.get(*name) {
            None => diff.missing.push(name.to_string()),
            Some(t) if t.shape() != shape.as_slice() => {
                diff.mismatched.push(format!("{name} {:?} != {:?}", t.shape(), shape))
            }
            Some(_) => {}
        }
    }
    for name in params.keys().filter(|k| k.starts_with(&p)) {
        if !expected.contains_key(name.as_str()) {
            diff.unexpected.push(name.clone());
        }
    }
    diff
}

#[derive(Debug, Default, Clone)]
pub struct NameSetDiff {
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    pub mismatched: Vec<String>,
}

impl NameSetDiff {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.mismatched.is_empty()
    }

    /// Up to `limit` entries from each list.
    pub fn summary(&self, limit: usize) -> String {
        let fmt = |label: &str, v: &[String]| {
            if v.is_empty() {
                None
            } else {
                let shown: Vec<_> = v.iter().take(limit).cloned().collect();
                let more = if v.len() > limit { format!(" (+{} more)", v.len() - limit) } else { String::new() };
                Some(format!("{label}: [{}]{more}", shown.join(", ")))
            }
        };
        [fmt("missing", &self.missing), fmt("unexpected", &self.unexpected), fmt("shape mismatch", &self.mismatched)]
            .into_iter()
            .flatten()
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Build an encoder with fresh Kaiming-uniform weights.
pub fn build_encoder<R: Rng + ?Sized>(cfg: &EncoderConfig, seed: u64, rng: &mut R) -> Result<NetworkWeights> {
    cfg.validate()?;
    Ok(NetworkWeights {
        params: init_params(&cfg.param_specs(), rng),
        meta: WeightsMeta {
            variant: cfg.variant,
            input_channels: cfg.in_channels,
            stage_widths: cfg.stage_widths.clone(),
            stage: "random-init".into(),
            epoch: 0,
            seed,
            tags: BTreeMap::new(),
        },
    })
}

/// Encoder weights plus a freshly initialized decoder.
pub fn build_unet<R: Rng + ?Sized>(
    encoder: &NetworkWeights,
    dec: &DecoderConfig,
    rng: &mut R,
) -> Result<NetworkWeights> {
    let enc_cfg = EncoderConfig::from_meta(&encoder.meta);
    enc_cfg.validate()?;
    dec.validate(&enc_cfg)?;
    let mut params = encoder.subset("encoder");
    params.extend(init_params(&dec.param_specs(&enc_cfg), rng));
    Ok(NetworkWeights { params, meta: encoder.meta.clone() })
}

/// Fresh projector and predictor parameter maps.
pub fn build_byol_heads<R: Rng + ?Sized>(
    embedding_dim: usize,
    cfg: &HeadConfig,
    rng: &mut R,
) -> Result<(Params<f32>, Params<f32>)> {
    ensure(embedding_dim >= 1, || "embedding_dim must be >= 1".into())?;
    cfg.validate()?;
    let projector = init_params(&cfg.projector_specs(embedding_dim), rng);
    let predictor = init_params(&cfg.predictor_specs(), rng);
    Ok((projector, predictor))
}

/// Forward-pass context binding a parameter map to a tape.
pub struct ForwardCtx<'a, T: Scalar> {
    pub graph: Graph<T>,
    params: &'a Params<T>,
    leaves: BTreeMap<String, NodeId>,
    train: bool,
    track_grads: bool,
    bn_nodes: Vec<(String, NodeId)>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    /// `train` selects batch statistics in batch norm; `track_grads` marks
    /// trainable parameters as requiring gradients.
    pub fn new(params: &'a Params<T>, train: bool, track_grads: bool) -> Self {
        Self { graph: Graph::new(), params, leaves: BTreeMap::new(), train, track_grads, bn_nodes: Vec::new() }
    }

    pub fn input(&mut self, x: Tensor<T>) -> NodeId {
        self.graph.leaf(x, false)
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from network"))
            .clone();
        let id = self.graph.leaf(value, self.track_grads && is_trainable(name));
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn conv(&mut self, x: NodeId, prefix: &str, stride: usize, pad: usize, bias: bool) -> NodeId {
        let w = self.param(&format!("{prefix}.weight"));
        let b = bias.then(|| self.param(&format!("{prefix}.bias")));
        self.graph.conv2d(x, w, b, stride, pad)
    }

    pub fn bn(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let gamma = self.param(&format!("{prefix}.scale"));
        let beta = self.param(&format!("{prefix}.shift"));
        let id = if self.train {
            self.graph.batch_norm(x, gamma, beta, None)
        } else {
            let rm = self.params[&format!("{prefix}.running_mean")].data();
            let rv = self.params[&format!("{prefix}.running_var")].data();
            self.graph.batch_norm(x, gamma, beta, Some((rm, rv)))
        };
        if self.train {
            self.bn_nodes.push((prefix.to_string(), id));
        }
        id
    }

    fn conv_bn_relu(&mut self, x: NodeId, prefix: &str, conv: &str, bn: &str, stride: usize, pad: usize) -> NodeId {
        let h = self.conv(x, &format!("{prefix}.{conv}"), stride, pad, false);
        let h = self.bn(h, &format!("{prefix}.{bn}"));
        self.graph.relu(h)
    }

    pub fn linear(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        self.graph.linear(x, w, Some(b))
    }

    /// Gradients of every trainable parameter touched by the forward pass.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Vec<T>> {
        self.leaves
            .iter()
            .filter(|(name, _)| is_trainable(name))
            .filter_map(|(name, &id)| grads.take(id).map(|g| (name.clone(), g)))
            .collect()
    }

    /// Batch statistics of every training-mode batch norm, in call order.
    pub fn bn_updates(&self) -> Vec<(String, BatchStats<T>)> {
        self.bn_nodes
            .iter()
            .filter_map(|(p, id)| self.graph.batch_stats(*id).map(|s| (p.clone(), s.clone())))
            .collect()
    }
}

/// Running-statistics update with momentum `m`:
/// `running <- (1 - m) running + m batch`.
pub fn apply_bn_updates<T: Scalar>(params: &mut Params<T>, updates: &[(String, BatchStats<T>)], momentum: f64) {
    let m = T::from_f64(momentum);
    for (prefix, stats) in updates {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            if let Some(t) = params.get_mut(&format!("{prefix}.{suffix}")) {
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

/// Runs the U-Net on an NCHW batch and returns the logits node.
pub fn unet_forward<T: Scalar>(
    ctx: &mut ForwardCtx<'_, T>,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    x: NodeId,
) -> NodeId {
    let out = enc.forward(ctx, x);
    dec.forward(ctx, &out.features)
}

/// Convenience: inference-only U-Net logits.
pub fn unet_logits(
    weights: &NetworkWeights,
    dec: &DecoderConfig,
    input: Tensor<f32>,
    train_mode_bn: bool,
) -> Result<Tensor<f32>> {
    let enc = EncoderConfig::from_meta(&weights.meta);
    let total = enc.total_stride();
    let s = input.shape();
    if s.len() != 4 || s[1] != enc.in_channels || s[2] % total != 0 || s[3] % total != 0 {
        return Err(Error::Argument(format!(
            "U-Net input must be Bx{}xSxS with S divisible by {total}, got {s:?}",
            enc.in_channels
        )));
    }
    let mut ctx = ForwardCtx::new(&weights.params, train_mode_bn, false);
    let x = ctx.input(input);
    let logits = unet_forward(&mut ctx, &enc, dec, x);
    Ok(ctx.graph.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init::kaiming_bound;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn tiny_encoder_traces_strides() {
        let cfg = EncoderConfig::tiny(vec![8, 16, 32], 1);
        let w = build_encoder(&cfg, 0, &mut rng(0)).unwrap();
        let mut ctx = ForwardCtx::new(&w.params, true, false);
        let x = ctx.input(Tensor::full(&[1, 1, 32, 32], 0.5));
        let out = cfg.forward(&mut ctx, x);
        assert_eq!(ctx.graph.value(out.embedding).shape(), &[1, 32]);
        let sizes: Vec<_> = out.features.iter().map(|&f| ctx.graph.value(f).shape()[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4]);
        assert_eq!(cfg.embedding_dim(), 32);
    }

    #[test]
    fn resnet50_parameter_count_and_first_layer() {
        let cfg = EncoderConfig::resnet50(3);
        let specs = cfg.param_specs();
        let trainable: usize = specs
            .iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        // torchvision resnet50 without the classifier
        assert_eq!(trainable, 23_508_032);
        assert_eq!(cfg.embedding_dim(), 2048);
        let first = specs.iter().find(|(n, _)| n == cfg.first_conv_name()).unwrap();
        assert_eq!(first.1, vec![64, 3, 7, 7]);

        let dec = DecoderConfig::default_for(&EncoderConfig::resnet50(1), 4);
        let dec_count: usize = dec
            .param_specs(&EncoderConfig::resnet50(1))
            .iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert!((8_500_000..9_500_000).contains(&dec_count), "decoder params {dec_count}");
        assert!(dec_count < trainable);
    }

    #[test]
    fn build_is_deterministic_and_initialized_within_bounds() {
        let cfg = EncoderConfig::tiny(vec![4, 8, 16], 1);
        let a = build_encoder(&cfg, 0, &mut rng(7)).unwrap();
        let b = build_encoder(&cfg, 0, &mut rng(7)).unwrap();
        assert_eq!(a, b);
        for (name, t) in &a.params {
            if name.ends_with(".weight") {
                let bound = kaiming_bound(t.shape()[1..].iter().product()) as f32;
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn invalid_in_channels_rejected() {
        let cfg = EncoderConfig::tiny(vec![4, 8, 16], 2);
        assert!(matches!(build_encoder(&cfg, 0, &mut rng(0)), Err(Error::Argument(_))));
    }

    #[test]
    fn unet_output_matches_input_size() {
        let cfg = EncoderConfig::tiny(vec![4, 8, 16], 1);
        let enc = build_encoder(&cfg, 0, &mut rng(1)).unwrap();
        let dec = DecoderConfig::default_for(&cfg, 4);
        let net = build_unet(&enc, &dec, &mut rng(2)).unwrap();
        for s in [8usize, 16, 64] {
            let y = unet_logits(&net, &dec, Tensor::full(&[2, 1, s, s], 0.3), true).unwrap();
            assert_eq!(y.shape(), &[2, 4, s, s]);
        }
        let again = build_unet(&enc, &dec, &mut rng(2)).unwrap();
        let x = Tensor::from_vec(&[1, 1, 16, 16], (0..256).map(|v| (v % 7) as f32 / 7.0).collect());
        assert_eq!(
            unet_logits(&net, &dec, x.clone(), false).unwrap(),
            unet_logits(&again, &dec, x, false).unwrap()
        );
    }

    #[test]
    fn decoder_stage_mismatch_rejected() {
        let cfg = EncoderConfig::tiny(vec![4, 8, 16], 1);
        let enc = build_encoder(&cfg, 0, &mut rng(1)).unwrap();
        let dec = DecoderConfig { stage_channels: vec![8, 4], ..DecoderConfig::default_for(&cfg, 4) };
        assert!(matches!(build_unet(&enc, &dec, &mut rng(2)), Err(Error::Argument(_))));
    }

    #[test]
    fn heads_shape_contract_and_zero_input() {
        let heads = HeadConfig { projector_hidden: 64, projector_out: 16, predictor_hidden: 64, predictor_out: 16 };
        let (proj, pred) = build_byol_heads(32, &heads, &mut rng(3)).unwrap();
        let mut params = proj.clone();
        params.extend(pred.clone());
        let mut ctx = ForwardCtx::new(&params, true, false);
        let x = ctx.input(Tensor::zeros(&[2, 32]));
        let z = mlp_forward(&mut ctx, "projector", x);
        let q = mlp_forward(&mut ctx, "predictor", z);
        assert_eq!(ctx.graph.value(z).shape(), &[2, 16]);
        assert_eq!(ctx.graph.value(q).shape(), &[2, 16]);
        assert!(ctx.graph.value(q).is_finite());
        let (proj2, pred2) = build_byol_heads(32, &heads, &mut rng(3)).unwrap();
        assert_eq!((proj, pred), (proj2, pred2));
    }

    #[test]
    fn every_trainable_unet_param_receives_a_gradient() {
        let cfg = EncoderConfig::tiny(vec![4, 8, 16], 1);
        let enc = build_encoder(&cfg, 0, &mut rng(1)).unwrap();
        let dec = DecoderConfig::default_for(&cfg, 3);
        let net = build_unet(&enc, &dec, &mut rng(2)).unwrap();
        let mut ctx = ForwardCtx::new(&net.params, true, true);
        let x = ctx.input(Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|v| (v % 11) as f32 / 11.0).collect()));
        let logits = unet_forward(&mut ctx, &cfg, &dec, x);
        let n = ctx.graph.value(logits).len();
        let w: Vec<f32> = (0..n).map(|i| ((i % 5) as f32 - 2.0) * 0.1).collect();
        let value = ctx.graph.value(logits).data().iter().zip(&w).map(|(a, b)| a * b).sum();
        let loss = ctx.graph.loss(value, vec![(logits, w)]);
        let mut grads = ctx.graph.backward(loss);
        let g = ctx.param_grads(&mut grads);
        let trainable: Vec<_> = net.params.keys().filter(|k| is_trainable(k)).cloned().collect();
        assert_eq!(g.keys().cloned().collect::<Vec<_>>(), trainable);
    }
}
