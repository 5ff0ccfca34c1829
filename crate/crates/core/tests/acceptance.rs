//! Acceptance criteria. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails. Pass criterion numbers as arguments
//! to run a subset, e.g. `cargo test --test acceptance -- 1 4 8`.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use medpretrain::analysis::{convergence_steps, curve_auc, detect_transition, fit_power_law, normalized_auc};
use medpretrain::augment::{make_view_pair, AugmentConfig};
use medpretrain::autodiff::conv2d_forward;
use medpretrain::byol::{byol_loss, byol_loss_and_grads, byol_train_step, ema_update, ByolConfig, ByolState, TauSchedule};
use medpretrain::data::{
    generate_synthetic_dataset, sample_labeled_subset, split_by_patient, SplitDatasets, SplitFractions, SubsetSize,
    SubsetSpec, SyntheticSpec,
};
use medpretrain::harness::{
    ablation_cell_seed, data_efficiency_sweep, pretrain_epoch_ablation, read_record, record_digest, subset_seed,
    RunStatus, SweepContext, SweepSpec, RECORD_FILE,
};
use medpretrain::nets::checkpoint::file_digest;
use medpretrain::nets::init::fan_in;
use medpretrain::nets::{
    adapt_input_layer, build_encoder, kaiming_bound, params_bit_equal, save_checkpoint, EncoderConfig, HeadConfig,
    Params,
};
use medpretrain::pipeline::{run_pipeline, PipelineKind, PipelineSpec};
use medpretrain::seeding::{rng_from, Rng as SeededRng};
use medpretrain::seg::{finetune, jaccard_loss, jaccard_loss_and_grad, soft_iou, EncoderInit, SegConfig, JACCARD_EPS};
use medpretrain::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn small_heads() -> HeadConfig {
    HeadConfig { projector_hidden: 16, projector_out: 8, predictor_hidden: 16, predictor_out: 8 }
}

fn small_data(patients: usize, frames: usize, spf: usize, size: usize) -> SplitDatasets {
    let ds = generate_synthetic_dataset(&SyntheticSpec {
        n_patients: patients,
        frames_per_cycle: frames,
        slices_per_frame: spf,
        image_size: size,
        seed: 0,
    })
    .unwrap();
    split_by_patient(&ds, SplitFractions::default(), 0).unwrap()
}

fn criterion_1() -> Outcome {
    let enc_cfg = EncoderConfig::tiny(vec![4, 4, 8], 1);
    let ds = generate_synthetic_dataset(&SyntheticSpec { n_patients: 1, frames_per_cycle: 6, slices_per_frame: 1, image_size: 16, seed: 1 })
        .unwrap();
    let aug = AugmentConfig { output_size: 16, ..Default::default() };
    let mut steps = 0;
    for (schedule, tau_base) in [(TauSchedule::CosineToOne, 0.99), (TauSchedule::Constant, 0.0), (TauSchedule::Constant, 1.0)] {
        let cfg = ByolConfig { tau_schedule: schedule, tau_base, batch_size: 6, heads: small_heads(), ..Default::default() };
        let enc = build_encoder(&enc_cfg, 0, &mut rng_from(0)).unwrap();
        let mut state = ByolState::new(&enc, &cfg, 8, &mut rng_from(1)).unwrap();
        let mut rng = rng_from(2);
        for _ in 0..4 {
            let batch: Vec<_> = ds.slices().iter().map(|s| make_view_pair(s.image(), &aug, &mut rng).unwrap()).collect();
            let pre = state.target.clone();
            byol_train_step(&mut state, &batch, &cfg).map_err(|e| e.to_string())?;
            let expect = ema_update(&state.online, &pre, state.tau).unwrap();
            check(params_bit_equal(&expect.params, &state.target.params, ""), || {
                format!("target differs from ema(online', target, {}) at step {}", state.tau, state.step)
            })?;
            if schedule == TauSchedule::Constant && tau_base == 1.0 {
                check(params_bit_equal(&pre.params, &state.target.params, ""), || "tau = 1 moved the target".into())?;
            }
            if schedule == TauSchedule::Constant && tau_base == 0.0 {
                let shared: Params<f32> =
                    state.online.params.iter().filter(|(k, _)| !k.starts_with("predictor.")).map(|(k, v)| (k.clone(), v.clone())).collect();
                check(params_bit_equal(&shared, &state.target.params, ""), || "tau = 0 target is not the online copy".into())?;
            }
            steps += 1;
        }
    }
    Ok(format!("{steps} steps bit-exact, tau in {{0, 1}} edge cases hold"))
}

fn criterion_2() -> Outcome {
    let src_cfg = EncoderConfig::tiny(vec![8, 16, 32], 3);
    let src = build_encoder(&src_cfg, 0, &mut rng_from(10)).unwrap();
    let adapted = adapt_input_layer(&src).map_err(|e| e.to_string())?;
    let name = src_cfg.first_conv_name();
    let mut rng = rng_from(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (32, 32);
        let x: Vec<f32> = (0..h * w).map(|_| rng.random()).collect();
        let gray = Tensor::from_vec(&[1, 1, h, w], x.clone());
        let rgb = Tensor::from_vec(&[1, 3, h, w], [x.clone(), x.clone(), x].concat());
        let a = conv2d_forward(&gray, adapted.get(name).unwrap(), 2, 1);
        let b = conv2d_forward(&rgb, src.get(name).unwrap(), 2, 1);
        let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs() as f64));
        worst = worst.max(diff / scale);
    }
    check(worst <= 1e-5, || format!("max relative error {worst:.3e} > 1e-5"))?;
    Ok(format!("max relative error {worst:.3e} over 100 inputs"))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn criterion_3() -> Outcome {
    let h = 1e-6;
    let mut rng = rng_from(20);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for _ in 0..20 {
        let (b, d) = (rng.random_range(1..5), rng.random_range(2..7));
        let v = |rng: &mut SeededRng| -> Vec<f64> { (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (q1, z2, q2, z1) = (v(&mut rng), v(&mut rng), v(&mut rng), v(&mut rng));
        let (_, g1, g2) = byol_loss_and_grads(&q1, &z2, &q2, &z1, d).unwrap();
        for which in 0..2 {
            let (g, base) = if which == 0 { (&g1, &q1) } else { (&g2, &q2) };
            for i in 0..base.len() {
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    p[i] += delta;
                    if which == 0 {
                        byol_loss(&p, &z2, &q2, &z1, d).unwrap()
                    } else {
                        byol_loss(&q1, &z2, &p, &z1, d).unwrap()
                    }
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max(rel_err(g[i], num));
            }
        }
        instances += 1;
    }
    let byol_worst = worst;
    worst = 0.0;
    for _ in 0..20 {
        let (b, c, hh, ww) = (rng.random_range(1..3), rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..5));
        let n = b * c * hh * ww;
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let target: Vec<u8> = (0..b * hh * ww).map(|_| rng.random_range(0..c as u8)).collect();
        let shape = [b, c, hh, ww];
        let (_, g) = jaccard_loss_and_grad(&probs, &target, shape, JACCARD_EPS).unwrap();
        for i in 0..n {
            let eval = |delta: f64| {
                let mut p = probs.clone();
                p[i] += delta;
                jaccard_loss(&p, &target, shape, JACCARD_EPS).unwrap()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(rel_err(g[i], num));
        }
        instances += 1;
    }
    check(byol_worst <= 1e-3 && worst <= 1e-3, || format!("relative error byol {byol_worst:.3e}, jaccard {worst:.3e}"))?;
    Ok(format!("{instances} instances, max relative error byol {byol_worst:.2e}, jaccard {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = rng_from(30);
    let mut worst_cos = 0.0f64;
    let mut worst_scale = 0.0f64;
    let mut worst_iou = 0.0f64;
    for _ in 0..50 {
        let (b, d) = (rng.random_range(1..6), rng.random_range(2..9));
        let mut v = || -> Vec<f64> { (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (q1, z2, q2, z1) = (v(), v(), v(), v());
        let cos = |a: &[f64], c: &[f64]| {
            let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * c.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let oracle: f64 = (0..b)
            .map(|i| {
                let r = i * d..(i + 1) * d;
                (2.0 - 2.0 * cos(&q1[r.clone()], &z2[r.clone()])) + (2.0 - 2.0 * cos(&q2[r.clone()], &z1[r]))
            })
            .sum::<f64>()
            / b as f64;
        let loss = byol_loss(&q1, &z2, &q2, &z1, d).unwrap();
        worst_cos = worst_cos.max((loss - oracle).abs());
        let mut scaled = |x: &[f64]| -> Vec<f64> {
            x.chunks(d).flat_map(|row| {
                let s = rng.random_range(0.01..100.0);
                row.iter().map(move |v| v * s).collect::<Vec<_>>()
            }).collect()
        };
        let (sq1, sz2, sq2, sz1) = (scaled(&q1), scaled(&z2), scaled(&q2), scaled(&z1));
        worst_scale = worst_scale.max((byol_loss(&sq1, &sz2, &sq2, &sz1, d).unwrap() - loss).abs());

        let (bb, c, hh, ww) = (rng.random_range(1..3), rng.random_range(2..5), rng.random_range(1..6), rng.random_range(1..6));
        let mut probs: Vec<f64> = (0..bb * c * hh * ww).map(|_| rng.random::<f64>()).collect();
        for n in 0..bb {
            for p in 0..hh * ww {
                let s: f64 = (0..c).map(|ch| probs[(n * c + ch) * hh * ww + p]).sum();
                (0..c).for_each(|ch| probs[(n * c + ch) * hh * ww + p] /= s);
            }
        }
        let target: Vec<u8> = (0..bb * hh * ww).map(|_| rng.random_range(0..c as u8)).collect();
        let shape = [bb, c, hh, ww];
        let sum = jaccard_loss(&probs, &target, shape, JACCARD_EPS).unwrap() + soft_iou(&probs, &target, shape, JACCARD_EPS).unwrap();
        worst_iou = worst_iou.max((sum - 1.0).abs());
    }
    check(worst_cos <= 1e-6, || format!("cosine identity off by {worst_cos:.3e}"))?;
    check(worst_scale <= 1e-6, || format!("scale invariance off by {worst_scale:.3e}"))?;
    check(worst_iou <= 1e-9, || format!("jaccard + soft IoU off by {worst_iou:.3e}"))?;
    Ok(format!("cosine {worst_cos:.1e}, scaling {worst_scale:.1e}, jaccard+IoU {worst_iou:.1e}"))
}

fn within_kaiming(params: &Params<f32>, prefix: &str) -> Result<usize, String> {
    let mut n = 0;
    for (name, t) in params.iter().filter(|(k, _)| k.starts_with(prefix)) {
        let ok = if name.ends_with(".weight") {
            let b = kaiming_bound(fan_in(t.shape())) as f32;
            t.data().iter().all(|v| v.abs() <= b)
        } else if name.ends_with(".scale") || name.ends_with(".running_var") {
            t.data().iter().all(|&v| v == 1.0)
        } else {
            t.data().iter().all(|&v| v == 0.0)
        };
        check(ok, || format!("{name} is outside its initial bounds"))?;
        n += 1;
    }
    check(n > 0, || format!("no parameters under `{prefix}`"))?;
    Ok(n)
}

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let enc_cfg = EncoderConfig::tiny(vec![4, 8, 8], 1);
    let data = small_data(3, 4, 2, 16);
    let aug = AugmentConfig { output_size: 16, ..Default::default() };
    let mut ext_cfg = enc_cfg.clone();
    ext_cfg.in_channels = 3;
    let ext = dir.path().join("external.ckpt");
    save_checkpoint(&build_encoder(&ext_cfg, 7, &mut rng_from(7)).unwrap(), &ext).unwrap();
    let ssl = ByolConfig { epochs: 1, batch_size: 4, heads: small_heads(), ..Default::default() };
    let seg = SegConfig { total_steps: Some(1), eval_every_steps: 1, ..Default::default() };
    let mut checked = Vec::new();
    for kind in [PipelineKind::SupImagenetThenByolDomain, PipelineKind::ByolImagenetThenByolDomain] {
        let spec = PipelineSpec { kind, external_weights_path: Some(ext.clone()), domain_ssl_cfg: Some(ssl.clone()) };
        let out = run_pipeline(&spec, &data.train, &enc_cfg, &aug, 5, None).map_err(|e| e.to_string())?;
        check(out.stage_inputs.len() == 2, || format!("{kind}: expected two stages"))?;
        let adapted = adapt_input_layer(&out.stage_outputs[0]).unwrap();
        check(params_bit_equal(&out.stage_inputs[1].params, &adapted.params, "encoder."), || {
            format!("{kind}: stage-2 input differs from adapted stage-1 output")
        })?;
        // stage-2 step 0: the BYOL online encoder is the stage input, heads are fresh
        let state = ByolState::new(&out.stage_inputs[1], &ssl, 1, &mut rng_from(0)).unwrap();
        check(params_bit_equal(&state.online.params, &adapted.params, "encoder."), || {
            format!("{kind}: BYOL step-0 encoder differs from stage input")
        })?;
        let heads = within_kaiming(&state.online.params, "projector.")? + within_kaiming(&state.online.params, "predictor.")?;
        // downstream step 0
        let subset = data.train.labeled_indices()[..2].to_vec();
        let ft = finetune(Some(&out.encoder), &enc_cfg, &subset, &data, &seg, &aug, 1).map_err(|e| e.to_string())?;
        check(params_bit_equal(&ft.initial.params, &out.encoder.params, "encoder."), || {
            format!("{kind}: fine-tuning step-0 encoder differs from pipeline output")
        })?;
        let dec = within_kaiming(&ft.initial.params, "decoder.")?;
        checked.push(format!("{kind} ({heads} head, {dec} decoder tensors)"));
    }
    Ok(checked.join("; "))
}

fn ordering_table(rows: &[(PipelineKind, u64, f64, u64, bool)]) -> String {
    let mut s = String::from("    pipeline      seed   AUC     convergence step\n");
    for (k, seed, auc, step, conv) in rows {
        s.push_str(&format!("    {:<13} {seed:>4}   {auc:.4}  {step}{}\n", k.name(), if *conv { "" } else { " (not converged)" }));
    }
    s
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(10, 25, 4, 64);
    let enc_cfg = EncoderConfig::tiny(vec![8, 16, 32], 1);
    // synthetic tissue classes are coded by intensity; strong photometric
    // jitter makes the SSL views discard it
    let aug = AugmentConfig { output_size: 64, brightness_delta_max: 0.1, contrast_factor_range: (0.8, 1.2), ..Default::default() };
    let ssl = ByolConfig { epochs: 20, learning_rate: 0.2, ..Default::default() };
    let seg = SegConfig { total_steps: Some(300), batch_size: 8, eval_every_steps: 20, ..Default::default() };
    let spec = SweepSpec {
        name: "ordering".into(),
        subset_sizes: vec![SubsetSize::Count(16)],
        seeds: (0..5).collect(),
        pipelines: vec![
            PipelineSpec::new(PipelineKind::RandomInit),
            PipelineSpec { domain_ssl_cfg: Some(ssl), ..PipelineSpec::new(PipelineKind::ByolDomain) },
        ],
    };
    let ctx = SweepContext {
        data: &data,
        encoder: &enc_cfg,
        augment: &aug,
        seg: &seg,
        sweep_seed: 0,
        out_dir: dir.path(),
        jobs: 1,
        deterministic: true,
    };
    let records = data_efficiency_sweep(&spec, &ctx).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for r in &records {
        check(r.status == RunStatus::Done, || format!("cell {:?} failed: {:?}", r.key(), r.error))?;
        let c = convergence_steps(&r.curve, 0.95).unwrap();
        rows.push((r.pipeline, r.seed, curve_auc(&r.curve, "eval_iou").unwrap(), c.step, c.converged));
    }
    let mean = |k: PipelineKind, f: &dyn Fn(&(PipelineKind, u64, f64, u64, bool)) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.0 == k).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (auc_b, auc_r) = (mean(PipelineKind::ByolDomain, &|r| r.2), mean(PipelineKind::RandomInit, &|r| r.2));
    let (conv_b, conv_r) = (mean(PipelineKind::ByolDomain, &|r| r.3 as f64), mean(PipelineKind::RandomInit, &|r| r.3 as f64));
    let summary = format!(
        "mean AUC BYOL_DOMAIN {auc_b:.4} vs RANDOM_INIT {auc_r:.4}; mean convergence step {conv_b:.1} vs {conv_r:.1}"
    );
    println!("{}", ordering_table(&rows));
    check(auc_b >= auc_r && conv_b <= conv_r, || summary.clone())?;
    Ok(summary)
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(4, 4, 2, 32);
    let enc_cfg = EncoderConfig::tiny(vec![4, 8, 8], 1);
    let aug = AugmentConfig { output_size: 32, ..Default::default() };
    let ssl = ByolConfig { epochs: 5, batch_size: 8, heads: small_heads(), ..Default::default() };
    let seg = SegConfig { total_steps: Some(20), eval_every_steps: 5, ..Default::default() };
    let ctx = SweepContext {
        data: &data,
        encoder: &enc_cfg,
        augment: &aug,
        seg: &seg,
        sweep_seed: 3,
        out_dir: dir.path(),
        jobs: 1,
        deterministic: true,
    };
    let base = build_encoder(&enc_cfg, 3, &mut rng_from(3)).unwrap();
    let seeds = [0u64, 1];
    let recs = pretrain_epoch_ablation(&base, &ssl, &seg, SubsetSize::Count(4), &seeds, &ctx).map_err(|e| e.to_string())?;
    check(recs.len() == 12, || format!("{} curves, expected 12", recs.len()))?;
    let keys: BTreeSet<(usize, u64)> = recs.iter().map(|r| (r.epoch, r.seed)).collect();
    let expected: BTreeSet<(usize, u64)> = (0..=5).flat_map(|e| seeds.map(|s| (e, s))).collect();
    check(keys == expected, || format!("keys {keys:?}"))?;
    for r in &recs {
        check(r.status == RunStatus::Done && !r.curve.is_empty(), || format!("epoch {} seed {} failed: {:?}", r.epoch, r.seed, r.error))?;
        let p = dir.path().join("ablation").join(format!("epoch-{}.ckpt", r.epoch));
        check(file_digest(&p).unwrap() == r.encoder_digest, || format!("epoch {} digest mismatch", r.epoch))?;
    }
    let labeled = data.train.labeled_indices().len();
    let direct_seg = SegConfig { encoder_init: EncoderInit::FromCheckpoint, total_steps: Some(seg.resolved_total_steps(labeled)), ..seg.clone() };
    for &s in &seeds {
        let subset = sample_labeled_subset(&data.train, SubsetSpec { size: SubsetSize::Count(4), seed: subset_seed(3, s) }).unwrap();
        let direct = finetune(Some(&base), &enc_cfg, &subset, &data, &direct_seg, &aug, ablation_cell_seed(3, s)).unwrap();
        let rec = recs.iter().find(|r| r.epoch == 0 && r.seed == s).unwrap();
        check(rec.curve == direct.curve, || format!("epoch-0 curve for seed {s} differs from direct fine-tuning"))?;
    }
    Ok("12 curves keyed (epoch 0..=5) x (seed 0, 1); epoch-0 curves equal direct fine-tuning".into())
}

fn criterion_8() -> Outcome {
    let mut rng = rng_from(80);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let sizes: Vec<usize> = (0..8).map(|i| (10.0 * 10f64.powf(i as f64 * 3.0 / 7.0)).round() as usize).collect();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let errs: Vec<f64> = sizes.iter().map(|&n| 2.0 * (n as f64).powf(-0.5) * (1.0 + noise.sample(&mut rng))).collect();
        let f = fit_power_law(&sizes, &errs, None).map_err(|e| e.to_string())?;
        worst = worst.max((f.alpha - 0.5).abs());
    }
    check(worst < 0.05, || format!("max |alpha - 0.5| = {worst:.4}"))?;
    let grid: Vec<usize> = (0..8).map(|k| 5 << k).collect();
    let piecewise: Vec<f64> =
        grid.iter().map(|&n| if n <= 50 { 1.0 / n as f64 } else { (1.0 / 50.0) * (n as f64 / 50.0).powf(-0.1) }).collect();
    let t = detect_transition(&grid, &piecewise, 0.5).map_err(|e| e.to_string())?;
    check(matches!(t, Some((a, b)) if a <= 50 && 50 <= b), || format!("transition {t:?} does not bracket 50"))?;
    let mut auc_err = 0.0f64;
    let xs: Vec<f64> = (0..=100).map(|i| i as f64 * 3.0).collect();
    let line: Vec<f64> = xs.iter().map(|x| 0.2 + 0.5 * x / 300.0).collect();
    auc_err = auc_err.max((normalized_auc(&xs, &line).unwrap() - 0.45).abs());
    let flat = vec![0.7; xs.len()];
    auc_err = auc_err.max((normalized_auc(&xs, &flat).unwrap() - 0.7).abs());
    let tri = [0.0, 1.0, 0.0];
    auc_err = auc_err.max((normalized_auc(&[0.0, 5.0, 10.0], &tri).unwrap() - 0.5).abs());
    check(auc_err <= 1e-9, || format!("AUC off by {auc_err:.3e}"))?;
    Ok(format!("max |alpha - 0.5| {worst:.4}, transition {t:?}, AUC error {auc_err:.1e}"))
}

const SWEEP_CONFIG: &str = r#"seed = 11
deterministic = true

[data.synthetic]
n_patients = 4
frames_per_cycle = 4
slices_per_frame = 2
image_size = 32

[augment]
output_size = 32

[byol]
epochs = 2
batch_size = 8

[byol.heads]
projector_hidden = 16
projector_out = 8
predictor_hidden = 16
predictor_out = 8

[encoder]
variant = "tiny"
stage_widths = [4, 8, 8]

[seg]
total_steps = 20
eval_every_steps = 5

[finetune]
subset_size = 4

[sweep]
name = "integrity"
subset_sizes = [1, 2, 4]
seeds = [0, 1, 2]

[[sweep.pipelines]]
kind = "RANDOM_INIT"

[[sweep.pipelines]]
kind = "BYOL_DOMAIN"
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_medpretrain"));
    c.env("RUST_LOG", "warn").stdout(Stdio::null()).stderr(Stdio::piped());
    c
}

fn run_ok(c: &mut Command) -> Result<(), String> {
    let out = c.output().map_err(|e| e.to_string())?;
    check(out.status.success(), || format!("command failed: {}", String::from_utf8_lossy(&out.stderr).trim()))
}

fn record_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == RECORD_FILE) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn digests(sweep: &Path) -> Result<Vec<((PipelineKind, usize, u64), String)>, String> {
    let files = record_files(sweep);
    let mut out = Vec::new();
    for f in &files {
        let r = read_record(f).map_err(|e| e.to_string())?;
        check(r.status == RunStatus::Done, || format!("{} not done: {:?}", f.display(), r.error))?;
        out.push((r.key(), record_digest(&r)));
    }
    out.sort();
    let keys: BTreeSet<_> = out.iter().map(|d| d.0).collect();
    check(keys.len() == out.len(), || format!("{} duplicate keys", out.len() - keys.len()))?;
    Ok(out)
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    fs::write(&cfg, SWEEP_CONFIG).unwrap();
    let sweep_of = |out: &Path| out.join("sweeps").join("integrity");

    // interrupted run, then resume
    let killed = dir.path().join("killed");
    let mut child = bin().args(["--config", cfg.to_str().unwrap(), "--out", killed.to_str().unwrap(), "sweep"]).spawn().unwrap();
    let start = Instant::now();
    while start.elapsed() < Duration::from_secs(300) {
        if record_files(&sweep_of(&killed)).len() >= 4 || child.try_wait().unwrap().is_some() {
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().ok();
    child.wait().unwrap();
    let at_kill = record_files(&sweep_of(&killed)).len();
    check(at_kill < 18, || "sweep finished before it could be interrupted".into())?;
    run_ok(bin().args(["--config", cfg.to_str().unwrap(), "--out", killed.to_str().unwrap(), "sweep"]))?;
    let resumed = digests(&sweep_of(&killed))?;
    check(resumed.len() == 18, || format!("{} records after resume, expected 18", resumed.len()))?;

    // two clean deterministic runs
    let mut clean = Vec::new();
    for name in ["clean-a", "clean-b"] {
        let out = dir.path().join(name);
        run_ok(bin().args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--deterministic", "--jobs", "2", "sweep"]))?;
        clean.push(digests(&sweep_of(&out))?);
    }
    check(clean[0].len() == 18, || format!("{} records, expected 18", clean[0].len()))?;
    check(clean[0] == clean[1], || "record digests differ between clean runs".into())?;
    check(resumed == clean[0], || "resumed sweep digests differ from a clean run".into())?;
    Ok(format!("18 records, interrupted at {at_kill}, resumed without duplicates; digests identical across runs"))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ft.toml");
    fs::write(&cfg, SWEEP_CONFIG).unwrap();
    let c = cfg.to_str().unwrap();
    let pre = dir.path().join("pre");
    run_ok(bin().args(["--config", c, "--out", pre.to_str().unwrap(), "pretrain", "--epochs", "1"]))?;
    let init = pre.join("pretrain").join("encoder.ckpt");
    let mut streams = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        run_ok(bin().args(["--config", c, "--out", out.to_str().unwrap(), "--seed", "5", "finetune", "--init", init.to_str().unwrap()]))?;
        streams.push(fs::read(out.join("finetune").join("metrics.csv")).unwrap());
    }
    check(streams[0] == streams[1], || "metric streams differ".into())?;
    let rows = streams[0].iter().filter(|&&b| b == b'\n').count();
    // header + 4 evaluations x 3 metrics + 2 test rows
    check(rows == 1 + 4 * 3 + 2, || format!("{rows} metric rows"))?;
    Ok(format!("metrics.csv byte-identical across runs ({} bytes, {rows} rows)", streams[0].len()))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "stop-gradient / EMA exactness", criterion_1),
        (2, "channel-adaptation equivalence", criterion_2),
        (3, "gradient oracles", criterion_3),
        (4, "loss identities", criterion_4),
        (5, "weight-transfer purity", criterion_5),
        (6, "desk-scale ordering experiment", criterion_6),
        (7, "epoch-ablation harness", criterion_7),
        (8, "scaling analytics", criterion_8),
        (9, "sweep integrity", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let listing = std::env::args().any(|a| a == "--list");
    let mut failed = 0;
    for (n, name, f) in criteria {
        if listing {
            println!("criterion_{n}: test");
            continue;
        }
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n:>2} PASS  {name} ({secs:.1} s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1} s): {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
