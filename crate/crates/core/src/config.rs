//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::byol::ByolConfig;
use crate::data::{
    generate_synthetic_dataset, load_directory_dataset, split_by_patient, SplitDatasets, SplitFractions, SubsetSize,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::harness::SweepSpec;
use crate::nets::EncoderConfig;
use crate::pipeline::{PipelineKind, PipelineSpec};
use crate::seeding::derive_seed;
use crate::seg::SegConfig;

/// Overrides `data.root` for directory datasets.
pub const DATA_ROOT_ENV: &str = "MEDPRETRAIN_DATA_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSourceKind {
    #[default]
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSourceKind,
    /// Dataset directory written by `synth-data` or prepared by hand.
    pub root: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Patient split for synthetic data; directory datasets carry their own.
    pub split: SplitFractions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSourceKind::Synthetic, root: None, synthetic: SyntheticSpec::default(), split: SplitFractions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// Encoder checkpoint to start from; required unless `seg.encoder_init` is random.
    pub init: Option<PathBuf>,
    pub subset_size: SubsetSize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { init: None, subset_size: SubsetSize::Fraction(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Base encoder; a fresh encoder from the global seed when absent.
    pub base: Option<PathBuf>,
    /// Domain-SSL settings; the `[byol]` section when absent.
    pub ssl: Option<ByolConfig>,
    pub subset_size: SubsetSize,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { base: None, ssl: None, subset_size: SubsetSize::Fraction(0.05), seeds: vec![0, 1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,
    pub jobs: usize,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub byol: ByolConfig,
    pub seg: SegConfig,
    pub pipeline: PipelineSpec,
    pub finetune: FinetuneSection,
    pub sweep: SweepSpec,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            out: PathBuf::from("out"),
            jobs: 1,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            byol: ByolConfig::default(),
            seg: SegConfig::default(),
            pipeline: PipelineSpec::new(PipelineKind::ByolDomain),
            finetune: FinetuneSection::default(),
            sweep: SweepSpec::default(),
            ablation: AblationSection::default(),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().replace('\n', " ");
            match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    Error::Config(format!("line {line}, column {col}: {msg}"))
                }
                None => Error::Config(msg),
            }
        })?;
        cfg.fill_ssl_defaults();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Pipelines without their own domain-SSL settings use `[byol]`.
    pub fn fill_ssl_defaults(&mut self) {
        let byol = self.byol.clone();
        for p in std::iter::once(&mut self.pipeline).chain(self.sweep.pipelines.iter_mut()) {
            if p.kind.needs_domain_ssl() && p.domain_ssl_cfg.is_none() {
                p.domain_ssl_cfg = Some(byol.clone());
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |what: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("[{what}] {e}")));
        wrap("encoder", self.encoder.validate())?;
        wrap("augment", self.augment.validate())?;
        wrap("byol", self.byol.validate())?;
        wrap("seg", self.seg.validate())?;
        wrap("sweep", self.sweep.validate())?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn ablation_ssl(&self) -> ByolConfig {
        self.ablation.ssl.clone().unwrap_or_else(|| self.byol.clone())
    }
}

/// Where the dataset came from, echoed into run provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataProvenance {
    pub source: DataSourceKind,
    pub root: Option<PathBuf>,
    /// Set when the root came from the environment.
    pub root_env: Option<String>,
    pub synthetic: Option<SyntheticSpec>,
}

/// Directory root: the environment variable wins over the file.
pub fn resolve_data_root(cfg: &DataConfig) -> (Option<PathBuf>, Option<String>) {
    match std::env::var(DATA_ROOT_ENV) {
        Ok(v) if !v.is_empty() => (Some(PathBuf::from(&v)), Some(format!("{DATA_ROOT_ENV}={v}"))),
        _ => (cfg.root.clone(), None),
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(SplitDatasets, DataProvenance)> {
    match cfg.data.source {
        DataSourceKind::Synthetic => {
            let ds = generate_synthetic_dataset(&cfg.data.synthetic)?;
            let splits = split_by_patient(&ds, cfg.data.split, derive_seed(cfg.data.synthetic.seed, "split", &[]))?;
            let prov = DataProvenance {
                source: DataSourceKind::Synthetic,
                root: None,
                root_env: None,
                synthetic: Some(cfg.data.synthetic.clone()),
            };
            Ok((splits, prov))
        }
        DataSourceKind::Directory => {
            let (root, env) = resolve_data_root(&cfg.data);
            let root = root.ok_or_else(|| {
                Error::Config(format!("directory data source needs data.root or {DATA_ROOT_ENV}"))
            })?;
            let splits = load_directory_dataset(&root)?;
            let prov = DataProvenance { source: DataSourceKind::Directory, root: Some(root), root_env: env, synthetic: None };
            Ok((splits, prov))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        let mut filled = cfg.clone();
        filled.fill_ssl_defaults();
        assert_eq!(back, filled);
        assert!(ExperimentConfig::from_toml("").unwrap().validate().is_ok());
    }

    #[test]
    fn unknown_key_names_key_and_position() {
        let text = "seed = 3\n\n[seg]\nbatch_size = 4\nbath_size = 2\n";
        let err = ExperimentConfig::from_toml(text).unwrap_err().to_string();
        assert!(err.contains("bath_size"), "{err}");
        assert!(err.contains("line 5"), "{err}");
        assert!(!err.contains('\n'));
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[data.synthetic]\nn_patients = 3\nframes_per_cycle = 4\nslices_per_frame = 1\nimage_size = 32\n\
             [seg]\ntotal_steps = 10\n[[sweep.pipelines]]\nkind = \"BYOL_DOMAIN\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seg.total_steps, Some(10));
        assert_eq!(cfg.seg.batch_size, SegConfig::default().batch_size);
        assert_eq!(cfg.sweep.pipelines.len(), 1);
        assert_eq!(cfg.sweep.pipelines[0].domain_ssl_cfg.as_ref(), Some(&cfg.byol));
        let (data, prov) = load_data(&cfg).unwrap();
        assert_eq!(data.iter().map(|d| d.patient_ids().len()).sum::<usize>(), 3);
        assert!(prov.synthetic.is_some());
    }

    #[test]
    fn directory_source_requires_root() {
        let cfg = ExperimentConfig::from_toml("[data]\nsource = \"directory\"\n").unwrap();
        if std::env::var(DATA_ROOT_ENV).is_err() {
            assert!(matches!(load_data(&cfg), Err(Error::Config(_))));
        }
    }
}
