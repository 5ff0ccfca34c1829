//! Command-line front end. Every command reads one config file, applies flag
//! overrides and writes its artifacts under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::analysis::{ablation_summary, emit_figures, summary_report};
use crate::byol::pretrain;
use crate::config::{load_data, DataProvenance, ExperimentConfig};
use crate::data::{
    dataset_stats, generate_synthetic_dataset, sample_labeled_subset, split_by_patient, write_directory_dataset,
    SplitDatasets, SubsetSize, SubsetSpec,
};
use crate::error::{Error, Result};
use crate::harness::{
    data_efficiency_sweep, index_records, pretrain_epoch_ablation, sweep_dir, AblationRecord, RunStatus,
    SweepContext,
};
use crate::metrics::MetricsSink;
use crate::nets::checkpoint::file_digest;
use crate::nets::{build_encoder, load_checkpoint, save_checkpoint, NetworkWeights};
use crate::pipeline::{run_dir, run_pipeline, PipelineKind};
use crate::seeding::{derive_rng, derive_seed};
use crate::seg::{evaluate, finetune, EncoderInit};

#[derive(Debug, Parser)]
#[command(name = "medpretrain", version, about = "Pretraining pipelines and data-efficiency sweeps for cardiac MRI segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalFlags {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Byte-stable outputs (no wall-clock fields).
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the resolved plan and exit without computing or writing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Allow writing into a non-empty target.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and write it as a directory dataset.
    SynthData {
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        slices_per_frame: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        /// Defaults to `<out>/data`.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Domain self-supervised pretraining on the train split.
    Pretrain {
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a segmentation network on a labeled subset.
    Finetune {
        /// Encoder checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Start from a random encoder instead of a checkpoint.
        #[arg(long, conflicts_with = "init")]
        random_init: bool,
        /// Slice count (`16`) or fraction of labeled slices (`0.05`).
        #[arg(long, value_parser = parse_subset)]
        subset: Option<SubsetSize>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Run one pretraining pipeline and save every stage.
    Pipeline {
        #[arg(long, value_parser = parse_kind)]
        kind: Option<PipelineKind>,
    },
    /// Data-efficiency sweep over subset sizes, seeds and pipelines.
    Sweep,
    /// Fine-tune from the encoder saved after every domain-SSL epoch.
    AblateEpochs {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Summarize sweep records into a report and figures.
    Analyze {
        /// Sweep directory holding `record.json` files.
        records: PathBuf,
        /// Epoch-ablation `curves.json` to summarize as well.
        #[arg(long)]
        ablation: Option<PathBuf>,
    },
}

fn parse_subset(s: &str) -> std::result::Result<SubsetSize, String> {
    if let Ok(c) = s.parse::<usize>() {
        return Ok(SubsetSize::Count(c));
    }
    match s.parse::<f64>() {
        Ok(f) if f > 0.0 && f <= 1.0 => Ok(SubsetSize::Fraction(f)),
        _ => Err(format!("expected a slice count or a fraction in (0, 1], got `{s}`")),
    }
}

fn parse_kind(s: &str) -> std::result::Result<PipelineKind, String> {
    PipelineKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = PipelineKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown pipeline `{s}`, expected one of {}", names.join(", "))
    })
}

/// Config file plus global flag overrides.
pub fn resolve_config(flags: &GlobalFlags) -> Result<ExperimentConfig> {
    let mut cfg = match &flags.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if flags.deterministic {
        cfg.deterministic = true;
    }
    if let Some(o) = &flags.out {
        cfg.out = o.clone();
    }
    if let Some(j) = flags.jobs {
        cfg.jobs = j;
    }
    cfg.fill_ssl_defaults();
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunInfo<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    data: &'a DataProvenance,
    config: &'a ExperimentConfig,
    result: T,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_existing_checkpoint(path: &Path) -> Result<NetworkWeights> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    load_checkpoint(path)
}

fn data_with_log(cfg: &ExperimentConfig) -> Result<(SplitDatasets, DataProvenance)> {
    let (data, prov) = load_data(cfg)?;
    if let Some(env) = &prov.root_env {
        info!("data root taken from {env}");
    }
    Ok((data, prov))
}

pub fn run(cli: Cli) -> Result<()> {
    let flags = cli.global.clone();
    let cfg = resolve_config(&flags)?;
    match cli.command {
        Command::SynthData { patients, frames, slices_per_frame, image_size, target } => {
            let mut spec = cfg.data.synthetic.clone();
            if let Some(v) = patients {
                spec.n_patients = v;
            }
            if let Some(v) = frames {
                spec.frames_per_cycle = v;
            }
            if let Some(v) = slices_per_frame {
                spec.slices_per_frame = v;
            }
            if let Some(v) = image_size {
                spec.image_size = v;
            }
            if let Some(s) = flags.seed {
                spec.seed = s;
            }
            let target = target.unwrap_or_else(|| cfg.out.join("data"));
            cmd_synth_data(&cfg, &spec, &target, flags.dry_run, flags.force)
        }
        Command::Pretrain { init, epochs } => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.byol.epochs = e;
            }
            cmd_pretrain(&cfg, init.as_deref(), flags.dry_run)
        }
        Command::Finetune { init, random_init, subset, steps } => {
            let mut cfg = cfg;
            if let Some(p) = init {
                cfg.finetune.init = Some(p);
            }
            if random_init {
                cfg.seg.encoder_init = EncoderInit::Random;
                cfg.finetune.init = None;
            }
            if let Some(s) = subset {
                cfg.finetune.subset_size = s;
            }
            if let Some(s) = steps {
                cfg.seg.total_steps = Some(s);
            }
            cmd_finetune(&cfg, flags.dry_run)
        }
        Command::Pipeline { kind } => {
            let mut cfg = cfg;
            if let Some(k) = kind {
                cfg.pipeline.kind = k;
                cfg.fill_ssl_defaults();
            }
            cmd_pipeline(&cfg, flags.dry_run)
        }
        Command::Sweep => cmd_sweep(&cfg, flags.dry_run),
        Command::AblateEpochs { base } => {
            let mut cfg = cfg;
            if let Some(b) = base {
                cfg.ablation.base = Some(b);
            }
            cmd_ablate_epochs(&cfg, flags.dry_run)
        }
        Command::Analyze { records, ablation } => cmd_analyze(&cfg, &records, ablation.as_deref(), flags.dry_run),
    }
}

fn is_non_empty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn cmd_synth_data(
    cfg: &ExperimentConfig,
    spec: &crate::data::SyntheticSpec,
    target: &Path,
    dry_run: bool,
    force: bool,
) -> Result<()> {
    if dry_run {
        println!(
            "synth-data: {} patients x {} frames x {} slices at {}x{} -> {}",
            spec.n_patients,
            spec.frames_per_cycle,
            spec.slices_per_frame,
            spec.image_size,
            spec.image_size,
            target.display()
        );
        return Ok(());
    }
    if target.exists() && !target.is_dir() {
        return Err(Error::Config(format!("target {} is not a directory", target.display())));
    }
    if is_non_empty_dir(target) && !force {
        return Err(Error::Config(format!("target {} is not empty; pass --force to overwrite", target.display())));
    }
    let ds = generate_synthetic_dataset(spec)?;
    let splits = split_by_patient(&ds, cfg.data.split, derive_seed(spec.seed, "split", &[]))?;
    let files = write_directory_dataset(&splits, target)?;
    for d in splits.iter() {
        let s = dataset_stats(d);
        println!("{}: {} slices, {} labeled, {} patients", s.split, s.n_slices, s.n_labeled, s.n_patients);
    }
    println!("wrote {} files to {}", files.len(), target.display());
    Ok(())
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, init: Option<&Path>, dry_run: bool) -> Result<()> {
    let dir = cfg.out.join("pretrain");
    let init = init.map(load_existing_checkpoint).transpose()?;
    let (data, prov) = data_with_log(cfg)?;
    let steps = crate::byol::steps_per_epoch(data.train.len(), cfg.byol.batch_size);
    if dry_run {
        println!(
            "pretrain: {} epochs x {steps} steps on {} train slices ({} encoder, init {}) -> {}",
            cfg.byol.epochs,
            data.train.len(),
            cfg.encoder.variant,
            if init.is_some() { "checkpoint" } else { "random" },
            dir.display()
        );
        return Ok(());
    }
    let res = pretrain(&data.train, &cfg.byol, &cfg.augment, &cfg.encoder, init.as_ref(), derive_seed(cfg.seed, "pretrain", &[]))?;
    let mut digests = Vec::new();
    for (e, w) in res.checkpoints.iter().enumerate() {
        digests.push(save_checkpoint(w, &dir.join(format!("epoch-{}.ckpt", e + 1)))?);
    }
    let digest = save_checkpoint(&res.encoder, &dir.join("encoder.ckpt"))?;
    let mut sink = MetricsSink::create(&dir.join("metrics.csv"))?;
    sink.ssl_history(&res.history)?;
    sink.finish()?;
    write_json(
        &dir.join("run.json"),
        &RunInfo { command: "pretrain", seed: cfg.seed, data: &prov, config: cfg, result: (&digest, &digests) },
    )?;
    if let Some(last) = res.history.last() {
        println!("pretrain: final loss {:.4} after {} steps", last.loss, last.step + 1);
    }
    println!("encoder: {} ({digest})", dir.join("encoder.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct FinetuneResult {
    subset: Vec<usize>,
    init_digest: Option<String>,
    test_loss: f64,
    test_iou: f64,
    model_digest: String,
}

pub fn cmd_finetune(cfg: &ExperimentConfig, dry_run: bool) -> Result<()> {
    let dir = cfg.out.join("finetune");
    let init = match (cfg.seg.encoder_init, &cfg.finetune.init) {
        (EncoderInit::Random, _) => None,
        (EncoderInit::FromCheckpoint, Some(p)) => Some((load_existing_checkpoint(p)?, file_digest(p)?)),
        (EncoderInit::FromCheckpoint, None) => {
            return Err(Error::Config(
                "fine-tuning needs an encoder checkpoint (--init or finetune.init) or --random-init".into(),
            ))
        }
    };
    let (data, prov) = data_with_log(cfg)?;
    let labeled = data.train.labeled_indices().len();
    let n = cfg.finetune.subset_size.resolve(labeled)?;
    let total = cfg.seg.resolved_total_steps(labeled);
    if dry_run {
        println!(
            "finetune: {n} of {labeled} labeled slices, {total} steps, eval every {} steps ({} evaluations) -> {}",
            cfg.seg.eval_every_steps,
            total / cfg.seg.eval_every_steps,
            dir.display()
        );
        return Ok(());
    }
    let subset = sample_labeled_subset(
        &data.train,
        SubsetSpec { size: SubsetSize::Count(n), seed: derive_seed(cfg.seed, "finetune-subset", &[]) },
    )?;
    let mut seg = cfg.seg.clone();
    seg.total_steps = Some(total);
    let out = finetune(
        init.as_ref().map(|i| &i.0),
        &cfg.encoder,
        &subset,
        &data,
        &seg,
        &cfg.augment,
        derive_seed(cfg.seed, "finetune", &[]),
    )?;
    let dec = seg.decoder_for(&crate::nets::EncoderConfig::from_meta(&out.weights.meta));
    let test = evaluate(&out.weights, &dec, &data.test, cfg.augment.output_size, seg.eval_batch_size)?;
    let mut sink = MetricsSink::create(&dir.join("metrics.csv"))?;
    sink.curve(&out.curve)?;
    let last = out.curve.steps.last().copied().unwrap_or(total);
    sink.row(last, "test", "jaccard_loss", test.loss)?;
    sink.row(last, "test", "iou", test.iou)?;
    sink.finish()?;
    let model_digest = save_checkpoint(&out.weights, &dir.join("model.ckpt"))?;
    let result = FinetuneResult { subset, init_digest: init.map(|i| i.1), test_loss: test.loss, test_iou: test.iou, model_digest };
    write_json(&dir.join("run.json"), &RunInfo { command: "finetune", seed: cfg.seed, data: &prov, config: cfg, result })?;
    println!("finetune: test IoU {:.4}, test loss {:.4}; metrics in {}", test.iou, test.loss, dir.join("metrics.csv").display());
    Ok(())
}

pub fn cmd_pipeline(cfg: &ExperimentConfig, dry_run: bool) -> Result<()> {
    let spec = &cfg.pipeline;
    spec.validate()?;
    let (data, _prov) = data_with_log(cfg)?;
    let dir = run_dir(&cfg.out, spec.kind, cfg.seed);
    if dry_run {
        let mut stages = Vec::new();
        if spec.kind.needs_external() {
            stages.push("import".to_string());
        }
        if let Some(ssl) = spec.domain_ssl_cfg.as_ref().filter(|_| spec.kind.needs_domain_ssl()) {
            let steps = crate::byol::steps_per_epoch(data.train.len(), ssl.batch_size);
            stages.push(format!("domain BYOL {} epochs x {steps} steps", ssl.epochs));
        }
        if stages.is_empty() {
            stages.push("random init".into());
        }
        println!("pipeline {}: {} -> {}", spec.kind, stages.join(" -> "), dir.display());
        return Ok(());
    }
    let out = run_pipeline(spec, &data.train, &cfg.encoder, &cfg.augment, cfg.seed, Some(&cfg.out))?;
    if !out.ssl_history.is_empty() {
        let mut sink = MetricsSink::create(&dir.join("metrics.csv"))?;
        sink.ssl_history(&out.ssl_history)?;
        sink.finish()?;
    }
    for s in &out.provenance.stages {
        println!("stage {}: {} ({} epochs) {}", s.name, s.source, s.epochs, s.digest);
    }
    println!("pipeline {} written to {}", spec.kind, dir.display());
    Ok(())
}

pub fn cmd_sweep(cfg: &ExperimentConfig, dry_run: bool) -> Result<()> {
    let spec = &cfg.sweep;
    let dir = sweep_dir(&cfg.out, &spec.name);
    if dry_run {
        println!(
            "sweep {}: {} sizes x {} seeds x {} pipelines = {} cells",
            spec.name,
            spec.subset_sizes.len(),
            spec.seeds.len(),
            spec.pipelines.len(),
            spec.nominal_cells()
        );
        let (data, _) = data_with_log(cfg)?;
        let labeled = data.train.labeled_indices().len();
        let sizes = spec.resolved_sizes(labeled)?;
        let sizes_text: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
        println!(
            "resolved against {labeled} labeled slices: sizes [{}], {} fine-tuning steps per cell",
            sizes_text.join(", "),
            cfg.seg.resolved_total_steps(labeled)
        );
        for p in &spec.pipelines {
            if let Err(e) = p.validate() {
                println!("warning: {e}");
            }
        }
        println!("records -> {}", dir.display());
        return Ok(());
    }
    for p in &spec.pipelines {
        p.validate()?;
    }
    let (data, prov) = data_with_log(cfg)?;
    let ctx = SweepContext {
        data: &data,
        encoder: &cfg.encoder,
        augment: &cfg.augment,
        seg: &cfg.seg,
        sweep_seed: cfg.seed,
        out_dir: &cfg.out,
        jobs: cfg.jobs,
        deterministic: cfg.deterministic,
    };
    write_json(&dir.join("run.json"), &RunInfo { command: "sweep", seed: cfg.seed, data: &prov, config: cfg, result: () })?;
    let records = data_efficiency_sweep(spec, &ctx)?;
    let failed = records.iter().filter(|r| r.status == RunStatus::Failed).count();
    println!("sweep {}: {} records ({failed} failed) in {}", spec.name, records.len(), dir.display());
    Ok(())
}

pub fn cmd_ablate_epochs(cfg: &ExperimentConfig, dry_run: bool) -> Result<()> {
    let ssl = cfg.ablation_ssl();
    let (data, prov) = data_with_log(cfg)?;
    let labeled = data.train.labeled_indices().len();
    if dry_run {
        let n = cfg.ablation.subset_size.resolve(labeled)?;
        println!(
            "ablate-epochs: {} SSL epochs -> {} encoders x {} seeds = {} fine-tuning runs on {n} slices, {} steps each",
            ssl.epochs,
            ssl.epochs + 1,
            cfg.ablation.seeds.len(),
            (ssl.epochs + 1) * cfg.ablation.seeds.len(),
            cfg.seg.resolved_total_steps(labeled)
        );
        return Ok(());
    }
    let base = match &cfg.ablation.base {
        Some(p) => load_existing_checkpoint(p)?,
        None => build_encoder(&cfg.encoder, cfg.seed, &mut derive_rng(cfg.seed, "ablation-base", &[]))?,
    };
    let ctx = SweepContext {
        data: &data,
        encoder: &cfg.encoder,
        augment: &cfg.augment,
        seg: &cfg.seg,
        sweep_seed: cfg.seed,
        out_dir: &cfg.out,
        jobs: cfg.jobs,
        deterministic: cfg.deterministic,
    };
    let records = pretrain_epoch_ablation(&base, &ssl, &cfg.seg, cfg.ablation.subset_size, &cfg.ablation.seeds, &ctx)?;
    let dir = cfg.out.join("ablation");
    write_json(&dir.join("run.json"), &RunInfo { command: "ablate-epochs", seed: cfg.seed, data: &prov, config: cfg, result: () })?;
    for s in ablation_summary(&records) {
        println!("epoch {}: {} runs, convergence step {:.1}, AUC {:.4}", s.epoch, s.runs, s.convergence_step, s.auc);
    }
    Ok(())
}

pub fn cmd_analyze(cfg: &ExperimentConfig, records_dir: &Path, ablation: Option<&Path>, dry_run: bool) -> Result<()> {
    if !records_dir.is_dir() {
        return Err(Error::Config(format!("records directory {} not found", records_dir.display())));
    }
    let records = index_records(records_dir)?;
    let dir = cfg.out.join("analysis");
    if dry_run {
        println!("analyze: {} records from {} -> {}", records.len(), records_dir.display(), dir.display());
        return Ok(());
    }
    let mut report = format!("# Data-efficiency summary\n\n{}", summary_report(&records));
    if let Some(p) = ablation {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let recs: Vec<AblationRecord> =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        report.push_str("\n## Pretraining-epoch ablation\n\n| epoch | runs | convergence step | AUC (eval IoU) |\n|---:|---:|---:|---:|\n");
        for s in ablation_summary(&recs) {
            report.push_str(&format!("| {} | {} | {:.1} | {:.4} |\n", s.epoch, s.runs, s.convergence_step, s.auc));
        }
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("report.md");
    fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
    let mut files = vec![path];
    if records.iter().any(|r| r.status == RunStatus::Done) {
        files.extend(emit_figures(&records, &dir)?);
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 4\njobs = 2\nout = \"a\"\n").unwrap();
        let cli = Cli::try_parse_from(["medpretrain", "--config", p.to_str().unwrap(), "--seed", "9", "sweep"]).unwrap();
        let cfg = resolve_config(&cli.global).unwrap();
        assert_eq!((cfg.seed, cfg.jobs, cfg.out), (9, 2, PathBuf::from("a")));
    }

    #[test]
    fn subset_argument_forms() {
        assert_eq!(parse_subset("16").unwrap(), SubsetSize::Count(16));
        assert_eq!(parse_subset("0.05").unwrap(), SubsetSize::Fraction(0.05));
        assert!(parse_subset("1.5").is_err());
    }
}
