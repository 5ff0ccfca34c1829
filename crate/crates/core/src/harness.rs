//! Experiment grids: the data-efficiency sweep over (pipeline, subset size,
//! seed) cells and the pretraining-epoch ablation. Cells persist one record
//! file each and a rerun skips completed cells.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::byol::{pretrain, ByolConfig};
use crate::data::{sample_labeled_subset, SplitDatasets, SubsetSize, SubsetSpec};
use crate::error::{ensure, Error, Result};
use crate::nets::checkpoint::file_digest;
use crate::nets::{load_checkpoint, save_checkpoint, EncoderConfig, NetworkWeights};
use crate::pipeline::{run_pipeline, PipelineKind, PipelineSpec};
use crate::seeding::derive_seed;
use crate::seg::{evaluate, finetune, EncoderInit, LearningCurve, SegConfig};

pub const RECORD_FILE: &str = "record.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub pipeline: PipelineKind,
    pub subset_size: usize,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    pub subset: Vec<usize>,
    pub curve: LearningCurve,
    pub final_test_loss: Option<f64>,
    pub final_test_iou: Option<f64>,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn key(&self) -> (PipelineKind, usize, u64) {
        (self.pipeline, self.subset_size, self.seed)
    }
}

/// SHA-256 over the record's JSON with wall-clock time removed.
pub fn record_digest(r: &RunRecord) -> String {
    let mut r = r.clone();
    r.wall_clock_seconds = 0.0;
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&r).expect("record serializes"));
    hex::encode(h.finalize())
}

pub fn default_subset_sizes() -> Vec<SubsetSize> {
    let mut v = vec![SubsetSize::Count(1)];
    v.extend([0.005, 0.01, 0.02, 0.05, 0.10, 0.25, 0.50, 1.0].map(SubsetSize::Fraction));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub name: String,
    pub subset_sizes: Vec<SubsetSize>,
    pub seeds: Vec<u64>,
    pub pipelines: Vec<PipelineSpec>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            name: "default".into(),
            subset_sizes: default_subset_sizes(),
            seeds: (0..10).collect(),
            pipelines: PipelineKind::ALL.into_iter().map(PipelineSpec::new).collect(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(!self.subset_sizes.is_empty() && !self.seeds.is_empty() && !self.pipelines.is_empty(), || {
            "sweep sizes, seeds and pipelines must be non-empty".into()
        })?;
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        ensure(distinct.len() == self.seeds.len(), || "sweep seeds must be distinct".into())?;
        let kinds: BTreeSet<_> = self.pipelines.iter().map(|p| p.kind).collect();
        ensure(kinds.len() == self.pipelines.len(), || "each pipeline kind may appear once".into())?;
        ensure(!self.name.is_empty() && !self.name.contains(['/', '\\']), || "invalid sweep name".into())
    }

    /// Grid size before resolving sizes against a dataset.
    pub fn nominal_cells(&self) -> usize {
        self.subset_sizes.len() * self.seeds.len() * self.pipelines.len()
    }

    /// Sorted distinct subset counts for `labeled` available slices.
    pub fn resolved_sizes(&self, labeled: usize) -> Result<Vec<usize>> {
        let set: BTreeSet<usize> = self.subset_sizes.iter().map(|s| s.resolve(labeled)).collect::<Result<_>>()?;
        Ok(set.into_iter().collect())
    }
}

/// Everything a sweep shares across cells.
pub struct SweepContext<'a> {
    pub data: &'a SplitDatasets,
    pub encoder: &'a EncoderConfig,
    pub augment: &'a AugmentConfig,
    pub seg: &'a SegConfig,
    pub sweep_seed: u64,
    pub out_dir: &'a Path,
    pub jobs: usize,
    /// Record zero wall-clock time so record files are byte-stable.
    pub deterministic: bool,
}

pub fn sweep_dir(out: &Path, name: &str) -> PathBuf {
    out.join("sweeps").join(name)
}

pub fn record_path(sweep: &Path, kind: PipelineKind, size: usize, seed: u64) -> PathBuf {
    sweep.join(kind.name()).join(size.to_string()).join(seed.to_string()).join(RECORD_FILE)
}

/// Subset seed of sweep seed `seed`; shared by every pipeline so that
/// pipelines see the same labeled slices.
pub fn subset_seed(sweep_seed: u64, seed: u64) -> u64 {
    derive_seed(sweep_seed, "subset", &[seed])
}

/// Fine-tuning seed of a cell. It ignores the pipeline, so every pipeline
/// gets the same decoder initialization, batch order and augmentations
/// and pipeline differences are paired comparisons.
pub fn cell_seed(sweep_seed: u64, size: usize, seed: u64) -> u64 {
    derive_seed(sweep_seed, "cell", &[size as u64, seed])
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("record path has a parent");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_record(path: &Path, r: &RunRecord) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(r).expect("record serializes");
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Scans a sweep tree and returns every readable record sorted by key.
/// Unreadable files are skipped with a warning.
pub fn index_records(sweep: &Path) -> Result<Vec<RunRecord>> {
    let mut out = BTreeMap::new();
    if !sweep.is_dir() {
        return Ok(Vec::new());
    }
    let mut stack = vec![sweep.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == RECORD_FILE) {
                match read_record(&p) {
                    Ok(r) => {
                        out.insert(r.key(), r);
                    }
                    Err(e) => warn!("skipping unreadable record: {e}"),
                }
            }
        }
    }
    Ok(out.into_values().collect())
}

/// Pipeline output encoder, cached as `<sweep>/<pipeline>/encoder.ckpt`.
fn pipeline_encoder(spec: &PipelineSpec, ctx: &SweepContext<'_>, sweep: &Path) -> Result<NetworkWeights> {
    let path = sweep.join(spec.kind.name()).join("encoder.ckpt");
    if path.is_file() {
        return load_checkpoint(&path);
    }
    let seed = derive_seed(ctx.sweep_seed, "pipeline", &[spec.kind.index()]);
    let out = run_pipeline(spec, &ctx.data.train, ctx.encoder, ctx.augment, seed, Some(sweep))?;
    let dir = path.parent().expect("parent");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&out.encoder, &path)?;
    Ok(out.encoder)
}

#[derive(Clone, Copy)]
struct Cell {
    pipeline: usize,
    size: usize,
    seed: u64,
}

fn run_cell(
    kind: PipelineKind,
    encoder: &NetworkWeights,
    cell: Cell,
    ctx: &SweepContext<'_>,
) -> RunRecord {
    let start = Instant::now();
    let mut rec = RunRecord {
        pipeline: kind,
        subset_size: cell.size,
        seed: cell.seed,
        status: RunStatus::Failed,
        error: None,
        subset: Vec::new(),
        curve: LearningCurve::default(),
        final_test_loss: None,
        final_test_iou: None,
        wall_clock_seconds: 0.0,
    };
    let result = (|| -> Result<()> {
        let subset = sample_labeled_subset(
            &ctx.data.train,
            SubsetSpec { size: SubsetSize::Count(cell.size), seed: subset_seed(ctx.sweep_seed, cell.seed) },
        )?;
        rec.subset = subset.clone();
        let mut seg = ctx.seg.clone();
        seg.encoder_init = if kind == PipelineKind::RandomInit { EncoderInit::Random } else { EncoderInit::FromCheckpoint };
        // the step budget is fixed by the full labeled set, not the subset
        seg.total_steps = Some(seg.resolved_total_steps(ctx.data.train.labeled_indices().len()));
        let seed = cell_seed(ctx.sweep_seed, cell.size, cell.seed);
        let out = finetune(Some(encoder), ctx.encoder, &subset, ctx.data, &seg, ctx.augment, seed)?;
        let dec = seg.decoder_for(&EncoderConfig::from_meta(&out.weights.meta));
        let test = evaluate(&out.weights, &dec, &ctx.data.test, ctx.augment.output_size, seg.eval_batch_size)?;
        rec.curve = out.curve;
        rec.final_test_loss = Some(test.loss);
        rec.final_test_iou = Some(test.iou);
        Ok(())
    })();
    match result {
        Ok(()) => rec.status = RunStatus::Done,
        Err(e) => {
            warn!("cell {kind}/{}/{} failed: {e}", cell.size, cell.seed);
            rec.error = Some(e.to_string());
        }
    }
    if !ctx.deterministic {
        rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    }
    rec
}

/// Runs every missing or failed cell of the grid and returns the full index.
pub fn data_efficiency_sweep(spec: &SweepSpec, ctx: &SweepContext<'_>) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    ctx.seg.validate()?;
    for p in &spec.pipelines {
        p.validate()?;
    }
    let sweep = sweep_dir(ctx.out_dir, &spec.name);
    let sizes = spec.resolved_sizes(ctx.data.train.labeled_indices().len())?;
    let mut pending = Vec::new();
    for (pi, p) in spec.pipelines.iter().enumerate() {
        for &size in &sizes {
            for &seed in &spec.seeds {
                let path = record_path(&sweep, p.kind, size, seed);
                let done = path.is_file() && read_record(&path).is_ok_and(|r| r.status == RunStatus::Done);
                if !done {
                    pending.push(Cell { pipeline: pi, size, seed });
                }
            }
        }
    }
    info!(
        "sweep {}: {} cells, {} pending",
        spec.name,
        sizes.len() * spec.seeds.len() * spec.pipelines.len(),
        pending.len()
    );
    let needed: BTreeSet<usize> = pending.iter().map(|c| c.pipeline).collect();
    let mut encoders = BTreeMap::new();
    for pi in needed {
        encoders.insert(pi, pipeline_encoder(&spec.pipelines[pi], ctx, &sweep)?);
    }

    let next = AtomicUsize::new(0);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..ctx.jobs.max(1).min(pending.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&cell) = pending.get(i) else { break };
                let kind = spec.pipelines[cell.pipeline].kind;
                let rec = run_cell(kind, &encoders[&cell.pipeline], cell, ctx);
                if let Err(e) = write_record(&record_path(&sweep, kind, cell.size, cell.seed), &rec) {
                    first_error.lock().expect("lock").get_or_insert(e);
                    break;
                }
                info!("cell {kind}/{}/{}: {:?}", cell.size, cell.seed, rec.status);
            });
        }
    });
    if let Some(e) = first_error.into_inner().expect("lock") {
        return Err(e);
    }
    index_records(&sweep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub epoch: usize,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    pub encoder_digest: String,
    pub curve: LearningCurve,
}

pub fn ablation_cell_seed(sweep_seed: u64, seed: u64) -> u64 {
    derive_seed(sweep_seed, "ablation", &[seed])
}

/// Fine-tunes from the encoder saved after every domain-SSL epoch, plus the
/// untouched base encoder as epoch 0. Returns curves sorted by (epoch, seed).
#[allow(clippy::too_many_arguments)]
pub fn pretrain_epoch_ablation(
    base: &NetworkWeights,
    ssl: &ByolConfig,
    seg: &SegConfig,
    subset_size: SubsetSize,
    seeds: &[u64],
    ctx: &SweepContext<'_>,
) -> Result<Vec<AblationRecord>> {
    ensure(ssl.checkpoint_every_epoch, || "epoch ablation requires checkpoint_every_epoch".into())?;
    ensure(!seeds.is_empty(), || "ablation needs at least one seed".into())?;
    let dir = ctx.out_dir.join("ablation");
    let ssl_seed = derive_seed(ctx.sweep_seed, "ablation-ssl", &[]);
    let res = pretrain(&ctx.data.train, ssl, ctx.augment, ctx.encoder, Some(base), ssl_seed)?;
    let mut encoders = vec![base.clone()];
    encoders.extend(res.checkpoints);
    let mut digests = Vec::new();
    for (e, w) in encoders.iter().enumerate() {
        let p = dir.join(format!("epoch-{e}.ckpt"));
        fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
        save_checkpoint(w, &p)?;
        digests.push(file_digest(&p)?);
    }
    let labeled = ctx.data.train.labeled_indices().len();
    let n = subset_size.resolve(labeled)?;
    let mut seg = seg.clone();
    seg.encoder_init = EncoderInit::FromCheckpoint;
    seg.total_steps = Some(seg.resolved_total_steps(labeled));

    let cells: Vec<(usize, u64)> = (0..encoders.len()).flat_map(|e| seeds.iter().map(move |&s| (e, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<AblationRecord>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..ctx.jobs.max(1).min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(e, seed)) = cells.get(i) else { break };
                let run = || -> Result<LearningCurve> {
                    let subset = sample_labeled_subset(
                        &ctx.data.train,
                        SubsetSpec { size: SubsetSize::Count(n), seed: subset_seed(ctx.sweep_seed, seed) },
                    )?;
                    let cs = ablation_cell_seed(ctx.sweep_seed, seed);
                    Ok(finetune(Some(&encoders[e]), ctx.encoder, &subset, ctx.data, &seg, ctx.augment, cs)?.curve)
                };
                let rec = match run() {
                    Ok(curve) => AblationRecord {
                        epoch: e,
                        seed,
                        status: RunStatus::Done,
                        error: None,
                        encoder_digest: digests[e].clone(),
                        curve,
                    },
                    Err(err) => AblationRecord {
                        epoch: e,
                        seed,
                        status: RunStatus::Failed,
                        error: Some(err.to_string()),
                        encoder_digest: digests[e].clone(),
                        curve: LearningCurve::default(),
                    },
                };
                results.lock().expect("lock").push(rec);
            });
        }
    });
    let mut out = results.into_inner().expect("lock");
    out.sort_by_key(|r| (r.epoch, r.seed));
    let path = dir.join("curves.json");
    write_atomic(&path, &serde_json::to_vec_pretty(&out).expect("serializes"))?;
    Ok(out)
}
