//! Pretraining pipelines: zero, one or two pretraining stages producing the
//! encoder handed to downstream segmentation. Only encoder weights cross a
//! stage boundary; heads are rebuilt by each stage.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::byol::{pretrain, ByolConfig, LossRecord};
use crate::data::SemiSupervisedDataset;
use crate::error::{Error, Result};
use crate::nets::arch::check_name_set;
use crate::nets::checkpoint::{digest_hex, encode_checkpoint};
use crate::nets::{
    build_encoder, load_checkpoint, save_checkpoint, transfer_encoder_weights, EncoderConfig, EncoderVariant,
    NetworkWeights,
};
use crate::seeding::{derive_rng, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelineKind {
    RandomInit,
    SupImagenet,
    ByolImagenet,
    ByolDomain,
    SupImagenetThenByolDomain,
    ByolImagenetThenByolDomain,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 6] = [
        PipelineKind::RandomInit,
        PipelineKind::SupImagenet,
        PipelineKind::ByolImagenet,
        PipelineKind::ByolDomain,
        PipelineKind::SupImagenetThenByolDomain,
        PipelineKind::ByolImagenetThenByolDomain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::RandomInit => "RANDOM_INIT",
            PipelineKind::SupImagenet => "SUP_IMAGENET",
            PipelineKind::ByolImagenet => "BYOL_IMAGENET",
            PipelineKind::ByolDomain => "BYOL_DOMAIN",
            PipelineKind::SupImagenetThenByolDomain => "SUP_IMAGENET_THEN_BYOL_DOMAIN",
            PipelineKind::ByolImagenetThenByolDomain => "BYOL_IMAGENET_THEN_BYOL_DOMAIN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }

    /// Stable index used for seed derivation and figure colours.
    pub fn index(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u64
    }

    pub fn needs_external(self) -> bool {
        !matches!(self, PipelineKind::RandomInit | PipelineKind::ByolDomain)
    }

    pub fn needs_domain_ssl(self) -> bool {
        matches!(
            self,
            PipelineKind::ByolDomain | PipelineKind::SupImagenetThenByolDomain | PipelineKind::ByolImagenetThenByolDomain
        )
    }

    fn import_stage_name(self) -> &'static str {
        match self {
            PipelineKind::SupImagenet | PipelineKind::SupImagenetThenByolDomain => "sup-imagenet",
            _ => "byol-imagenet",
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub kind: PipelineKind,
    #[serde(default)]
    pub external_weights_path: Option<PathBuf>,
    #[serde(default)]
    pub domain_ssl_cfg: Option<ByolConfig>,
}

impl PipelineSpec {
    pub fn new(kind: PipelineKind) -> Self {
        Self { kind, external_weights_path: None, domain_ssl_cfg: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.needs_external() {
            match &self.external_weights_path {
                None => return Err(Error::Config(format!("{} requires external_weights_path", self.kind))),
                Some(p) if !p.is_file() => {
                    return Err(Error::Config(format!("{}: external weights {} not found", self.kind, p.display())))
                }
                _ => {}
            }
        }
        if self.kind.needs_domain_ssl() {
            match &self.domain_ssl_cfg {
                None => return Err(Error::Config(format!("{} requires domain_ssl_cfg", self.kind))),
                Some(c) => c.validate().map_err(|e| Error::Config(format!("{}: {e}", self.kind)))?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceStage {
    pub name: String,
    pub source: String,
    pub epochs: usize,
    pub seed: u64,
    /// SHA-256 of the stage's output checkpoint bytes.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pipeline: PipelineKind,
    pub seed: u64,
    pub stages: Vec<ProvenanceStage>,
}

pub struct PipelineOutput {
    /// Single-channel encoder ready for fine-tuning.
    pub encoder: NetworkWeights,
    pub provenance: Provenance,
    /// Encoder entering each stage (after any channel adaptation).
    pub stage_inputs: Vec<NetworkWeights>,
    /// Encoder produced by each stage.
    pub stage_outputs: Vec<NetworkWeights>,
    pub ssl_history: Vec<LossRecord>,
}

/// Loads an externally produced encoder and checks its name set against
/// `expected`.
pub fn import_external_weights(path: &Path, expected: EncoderVariant) -> Result<NetworkWeights> {
    let w = load_checkpoint(path).map_err(|e| Error::Import(format!("{}: {e}", path.display())))?;
    let cfg = EncoderConfig { variant: expected, ..EncoderConfig::from_meta(&w.meta) };
    let mut diff = check_name_set(&w.params, &cfg.param_specs(), "encoder");
    diff.unexpected.extend(w.params.keys().filter(|k| !k.starts_with("encoder.")).cloned());
    if w.meta.variant != expected || !diff.is_empty() {
        return Err(Error::Import(format!(
            "{}: checkpoint variant {} does not match expected {expected}; {}",
            path.display(),
            w.meta.variant,
            diff.summary(10)
        )));
    }
    if !matches!(w.meta.input_channels, 1 | 3) {
        return Err(Error::Import(format!("{}: input_channels {} not in {{1,3}}", path.display(), w.meta.input_channels)));
    }
    Ok(w)
}

fn single_channel(w: &NetworkWeights) -> Result<NetworkWeights> {
    let mut dst = EncoderConfig::from_meta(&w.meta);
    dst.in_channels = 1;
    transfer_encoder_weights(w, &dst)
}

/// Directory of one pipeline run: `runs/<pipeline>/<seed>`.
pub fn run_dir(root: &Path, kind: PipelineKind, seed: u64) -> PathBuf {
    root.join("runs").join(kind.name()).join(seed.to_string())
}

/// Executes the stages of `spec` in order. With `out` set, every stage
/// output is written to `runs/<pipeline>/<seed>/stage-<n>/checkpoint.ckpt`
/// next to a `provenance.json`.
pub fn run_pipeline(
    spec: &PipelineSpec,
    unlabeled: &SemiSupervisedDataset,
    enc_cfg: &EncoderConfig,
    aug: &AugmentConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<PipelineOutput> {
    spec.validate()?;
    let kind = spec.kind;
    let mut stages = Vec::new();
    let mut stage_inputs = Vec::new();
    let mut stage_outputs = Vec::new();
    let mut ssl_history = Vec::new();

    let mut current: Option<NetworkWeights> = None;
    if kind.needs_external() {
        let path = spec.external_weights_path.as_ref().expect("validated");
        let w = import_external_weights(path, enc_cfg.variant)?;
        stages.push(ProvenanceStage {
            name: kind.import_stage_name().into(),
            source: path.display().to_string(),
            epochs: 0,
            seed: w.meta.seed,
            digest: digest_hex(&encode_checkpoint(&w)),
        });
        stage_inputs.push(w.clone());
        stage_outputs.push(w.clone());
        current = Some(w);
    }
    if kind.needs_domain_ssl() {
        let cfg = spec.domain_ssl_cfg.as_ref().expect("validated");
        let stage_seed = derive_seed(seed, "pipeline-ssl", &[kind.index()]);
        let init = match current.take() {
            // earliest single-channel stage: adapt before domain SSL
            Some(w) => single_channel(&w)?,
            None => fresh_encoder(enc_cfg, seed)?,
        };
        info!("{kind}: domain BYOL for {} epochs on {} slices", cfg.epochs, unlabeled.len());
        let source = stages.last().map(|s| s.name.clone()).unwrap_or_else(|| "random-init".into());
        stage_inputs.push(init.clone());
        let res = pretrain(unlabeled, cfg, aug, enc_cfg, Some(&init), stage_seed)?;
        let mut w = res.encoder;
        w.meta.stage = "byol-domain".into();
        stages.push(ProvenanceStage {
            name: "byol-domain".into(),
            source,
            epochs: cfg.epochs,
            seed: stage_seed,
            digest: digest_hex(&encode_checkpoint(&w)),
        });
        ssl_history = res.history;
        stage_outputs.push(w.clone());
        current = Some(w);
    }
    let encoder = match current {
        Some(w) => single_channel(&w)?,
        None => {
            let w = fresh_encoder(enc_cfg, seed)?;
            stages.push(ProvenanceStage {
                name: "random-init".into(),
                source: "kaiming-uniform".into(),
                epochs: 0,
                seed,
                digest: digest_hex(&encode_checkpoint(&w)),
            });
            stage_inputs.push(w.clone());
            stage_outputs.push(w.clone());
            w
        }
    };
    let provenance = Provenance { pipeline: kind, seed, stages };
    if let Some(root) = out {
        write_run(root, &provenance, &stage_outputs)?;
    }
    Ok(PipelineOutput { encoder, provenance, stage_inputs, stage_outputs, ssl_history })
}

/// Fresh single-channel encoder; shared by RANDOM_INIT and the domain SSL
/// stage so that zero SSL epochs reproduce RANDOM_INIT.
fn fresh_encoder(enc_cfg: &EncoderConfig, seed: u64) -> Result<NetworkWeights> {
    let mut c = enc_cfg.clone();
    c.in_channels = 1;
    build_encoder(&c, seed, &mut derive_rng(seed, "pipeline-encoder", &[]))
}

fn write_run(root: &Path, prov: &Provenance, outputs: &[NetworkWeights]) -> Result<()> {
    let dir = run_dir(root, prov.pipeline, prov.seed);
    for (i, w) in outputs.iter().enumerate() {
        let sd = dir.join(format!("stage-{}", i + 1));
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        save_checkpoint(w, &sd.join("checkpoint.ckpt"))?;
    }
    let p = dir.join("provenance.json");
    let text = serde_json::to_string_pretty(prov).expect("provenance serializes");
    fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticSpec};
    use crate::nets::{params_bit_equal, HeadConfig};
    use crate::seeding::rng_from;

    fn tiny() -> EncoderConfig {
        EncoderConfig::tiny(vec![4, 4, 8], 1)
    }

    fn external(dir: &Path, channels: usize) -> PathBuf {
        let mut c = tiny();
        c.in_channels = channels;
        let mut w = build_encoder(&c, 42, &mut rng_from(42)).unwrap();
        w.meta.stage = "external".into();
        let p = dir.join(format!("ext{channels}.ckpt"));
        save_checkpoint(&w, &p).unwrap();
        p
    }

    fn ssl(epochs: usize) -> ByolConfig {
        ByolConfig {
            epochs,
            batch_size: 4,
            heads: HeadConfig { projector_hidden: 8, projector_out: 4, predictor_hidden: 8, predictor_out: 4 },
            ..Default::default()
        }
    }

    fn data() -> SemiSupervisedDataset {
        generate_synthetic_dataset(&SyntheticSpec { n_patients: 1, frames_per_cycle: 4, slices_per_frame: 2, image_size: 16, seed: 0 })
            .unwrap()
    }

    fn aug() -> AugmentConfig {
        AugmentConfig { output_size: 16, ..Default::default() }
    }

    #[test]
    fn missing_external_weights_fail_before_compute() {
        let spec = PipelineSpec { kind: PipelineKind::SupImagenet, external_weights_path: None, domain_ssl_cfg: None };
        assert!(matches!(run_pipeline(&spec, &data(), &tiny(), &aug(), 0, None), Err(Error::Config(_))));
        let spec = PipelineSpec::new(PipelineKind::ByolDomain);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epoch_domain_ssl_equals_random_init() {
        let r = run_pipeline(&PipelineSpec::new(PipelineKind::RandomInit), &data(), &tiny(), &aug(), 3, None).unwrap();
        let spec = PipelineSpec { domain_ssl_cfg: Some(ssl(0)), ..PipelineSpec::new(PipelineKind::ByolDomain) };
        let b = run_pipeline(&spec, &data(), &tiny(), &aug(), 3, None).unwrap();
        assert_eq!(r.provenance.stages.len(), 1);
        assert!(params_bit_equal(&r.encoder.params, &b.encoder.params, ""));
    }

    #[test]
    fn hierarchical_stage_two_starts_from_adapted_import() {
        let dir = tempfile::tempdir().unwrap();
        let ext = external(dir.path(), 3);
        let spec = PipelineSpec {
            kind: PipelineKind::SupImagenetThenByolDomain,
            external_weights_path: Some(ext.clone()),
            domain_ssl_cfg: Some(ssl(1)),
        };
        let out = run_pipeline(&spec, &data(), &tiny(), &aug(), 1, Some(dir.path())).unwrap();
        let imported = import_external_weights(&ext, EncoderVariant::Tiny).unwrap();
        let adapted = crate::nets::adapt_input_layer(&imported).unwrap();
        assert!(params_bit_equal(&out.stage_inputs[1].params, &adapted.params, "encoder."));
        assert_eq!(out.encoder.meta.input_channels, 1);
        let rd = run_dir(dir.path(), spec.kind, 1);
        assert!(rd.join("stage-1/checkpoint.ckpt").is_file());
        assert!(rd.join("stage-2/checkpoint.ckpt").is_file());
        let prov: Provenance = serde_json::from_str(&fs::read_to_string(rd.join("provenance.json")).unwrap()).unwrap();
        let ck = fs::read(rd.join("stage-2/checkpoint.ckpt")).unwrap();
        assert_eq!(prov.stages[1].digest, digest_hex(&ck));
    }

    #[test]
    fn import_checks_variant_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let ext = external(dir.path(), 1);
        let w = import_external_weights(&ext, EncoderVariant::Tiny).unwrap();
        assert_eq!(w, load_checkpoint(&ext).unwrap());
        match import_external_weights(&ext, EncoderVariant::Resnet50) {
            Err(Error::Import(m)) => assert!(m.contains("resnet50") && m.contains("missing")),
            other => panic!("expected import error, got {:?}", other.map(|_| ())),
        }
        let bytes = fs::read(&ext).unwrap();
        fs::write(&ext, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(import_external_weights(&ext, EncoderVariant::Tiny), Err(Error::Import(_))));
    }

    #[test]
    fn pipelines_replay() {
        let spec = PipelineSpec { domain_ssl_cfg: Some(ssl(1)), ..PipelineSpec::new(PipelineKind::ByolDomain) };
        let a = run_pipeline(&spec, &data(), &tiny(), &aug(), 9, None).unwrap();
        let b = run_pipeline(&spec, &data(), &tiny(), &aug(), 9, None).unwrap();
        assert_eq!(a.provenance, b.provenance);
    }
}
