//! Learning-curve summaries, scaling fits and report/figure emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::harness::{AblationRecord, RunRecord, RunStatus};
use crate::pipeline::PipelineKind;
use crate::seg::LearningCurve;

pub const DEFAULT_PLATEAU_FRACTION: f64 = 0.95;
pub const DEFAULT_SLOPE_RATIO: f64 = 0.5;

/// Trapezoidal area under `ys` over `xs`, divided by the x span.
pub fn normalized_auc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    ensure(xs.len() >= 2 && xs.len() == ys.len(), || format!("need >= 2 matching points, got {} / {}", xs.len(), ys.len()))?;
    let span = xs[xs.len() - 1] - xs[0];
    ensure(span > 0.0, || "x values must span a positive range".into())?;
    let area: f64 = xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum();
    Ok(area / span)
}

pub fn curve_auc(curve: &LearningCurve, metric: &str) -> Result<f64> {
    let ys = curve.metric(metric).ok_or_else(|| Error::Argument(format!("unknown metric `{metric}`")))?;
    let xs: Vec<f64> = curve.steps.iter().map(|&s| s as f64).collect();
    normalized_auc(&xs, ys)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub step: u64,
    pub converged: bool,
}

/// First step whose value reaches `plateau_fraction` times the mean of the
/// last 10% of the curve (at least one point).
pub fn convergence_steps_raw(steps: &[u64], values: &[f64], plateau_fraction: f64) -> Result<Convergence> {
    ensure(!steps.is_empty() && steps.len() == values.len(), || "curve must be non-empty".into())?;
    let n = values.len();
    let tail = ((n as f64 * 0.1).ceil() as usize).max(1);
    let plateau = values[n - tail..].iter().sum::<f64>() / tail as f64;
    let threshold = plateau_fraction * plateau;
    Ok(match values.iter().position(|&v| v >= threshold) {
        Some(i) => Convergence { step: steps[i], converged: true },
        None => Convergence { step: steps[n - 1], converged: false },
    })
}

/// Convergence on the eval IoU curve.
pub fn convergence_steps(curve: &LearningCurve, plateau_fraction: f64) -> Result<Convergence> {
    convergence_steps_raw(&curve.steps, &curve.eval_iou, plateau_fraction)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// `error ~ c n^-alpha`
    pub alpha: f64,
    pub c: f64,
    pub r_squared: f64,
    pub n_min: usize,
    pub n_max: usize,
}

/// Least squares on `(ln n, ln e)` restricted to `range` (inclusive).
pub fn fit_power_law(sizes: &[usize], errors: &[f64], range: Option<(usize, usize)>) -> Result<ScalingFit> {
    ensure(sizes.len() == errors.len(), || "sizes and errors differ in length".into())?;
    let pts: Vec<(usize, f64)> = sizes
        .iter()
        .copied()
        .zip(errors.iter().copied())
        .filter(|(n, _)| range.is_none_or(|(lo, hi)| (lo..=hi).contains(n)))
        .collect();
    ensure(pts.len() >= 2, || format!("power-law fit needs >= 2 points in range, got {}", pts.len()))?;
    ensure(pts.iter().all(|&(n, e)| n > 0 && e > 0.0 && e.is_finite()), || {
        "power-law fit needs positive sizes and errors".into()
    })?;
    let xs: Vec<f64> = pts.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    ensure(sxx > 0.0, || "power-law fit needs at least two distinct sizes".into())?;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if ss_tot <= f64::EPSILON * m { 1.0 } else { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) };
    Ok(ScalingFit {
        alpha: -slope,
        c: intercept.exp(),
        r_squared: r2,
        n_min: pts.iter().map(|p| p.0).min().expect("non-empty"),
        n_max: pts.iter().map(|p| p.0).max().expect("non-empty"),
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Heuristic end of the power-law region: the first consecutive size pair
/// whose local log-log slope falls below `ratio` times the median slope of
/// the smallest third of sizes.
pub fn detect_transition(sizes: &[usize], errors: &[f64], ratio: f64) -> Result<Option<(usize, usize)>> {
    ensure(sizes.len() >= 4 && sizes.len() == errors.len(), || {
        format!("transition detection needs >= 4 points, got {}", sizes.len())
    })?;
    ensure(sizes.windows(2).all(|w| w[0] < w[1]), || "sizes must be strictly ascending".into())?;
    ensure(sizes[0] > 0 && errors.iter().all(|&e| e > 0.0), || "sizes and errors must be positive".into())?;
    let slopes: Vec<f64> = sizes
        .windows(2)
        .zip(errors.windows(2))
        .map(|(n, e)| (e[1].ln() - e[0].ln()) / ((n[1] as f64).ln() - (n[0] as f64).ln()))
        .collect();
    let k = ((sizes.len() as f64 / 3.0).ceil() as usize).max(2);
    let mut head = slopes[..k - 1].to_vec();
    let reference = median(&mut head).abs();
    if reference == 0.0 {
        return Ok(None);
    }
    Ok(slopes.iter().position(|s| s.abs() < ratio * reference).map(|i| (sizes[i], sizes[i + 1])))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, s)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn done(records: &[RunRecord]) -> Vec<&RunRecord> {
    records.iter().filter(|r| r.status == RunStatus::Done && !r.curve.is_empty()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    /// Sample standard deviation across seeds (zero for one seed).
    pub std: Vec<f64>,
}

/// Mean and standard deviation of eval IoU per pipeline at subset `size`.
pub fn curve_bands(records: &[RunRecord], size: usize) -> BTreeMap<PipelineKind, Band> {
    let mut groups: BTreeMap<PipelineKind, Vec<&RunRecord>> = BTreeMap::new();
    for r in done(records).into_iter().filter(|r| r.subset_size == size) {
        groups.entry(r.pipeline).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, rs)| {
            let len = rs.iter().map(|r| r.curve.len()).min().unwrap_or(0);
            let steps = rs[0].curve.steps[..len].to_vec();
            let (mean, std) = (0..len)
                .map(|i| mean_std(&rs.iter().map(|r| r.curve.eval_iou[i]).collect::<Vec<_>>()))
                .unzip();
            (k, Band { steps, mean, std })
        })
        .collect()
}

/// Eval-IoU AUC values per pipeline at `size`.
pub fn auc_by_pipeline(records: &[RunRecord], size: usize) -> BTreeMap<PipelineKind, Vec<f64>> {
    let mut out: BTreeMap<PipelineKind, Vec<f64>> = BTreeMap::new();
    for r in done(records).into_iter().filter(|r| r.subset_size == size) {
        if let Ok(a) = curve_auc(&r.curve, "eval_iou") {
            out.entry(r.pipeline).or_default().push(a);
        }
    }
    out
}

/// Pipelines ordered by ascending median AUC (ties by kind).
pub fn auc_order(aucs: &BTreeMap<PipelineKind, Vec<f64>>) -> Vec<PipelineKind> {
    let mut v: Vec<(f64, PipelineKind)> = aucs.iter().map(|(k, a)| (median(&mut a.clone()), *k)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v.into_iter().map(|p| p.1).collect()
}

/// Subset size used for curve and AUC figures: the largest one present.
pub fn headline_size(records: &[RunRecord]) -> Option<usize> {
    done(records).iter().map(|r| r.subset_size).max()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub pipeline: PipelineKind,
    pub size: usize,
    pub runs: usize,
    pub convergence_step: f64,
    pub auc: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub test_loss_mean: f64,
    pub test_loss_std: f64,
}

pub fn summary_rows(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(PipelineKind, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in done(records) {
        groups.entry((r.pipeline, r.subset_size)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((pipeline, size), rs)| {
            let conv: Vec<f64> = rs
                .iter()
                .filter_map(|r| convergence_steps(&r.curve, DEFAULT_PLATEAU_FRACTION).ok())
                .map(|c| c.step as f64)
                .collect();
            let auc: Vec<f64> = rs.iter().filter_map(|r| curve_auc(&r.curve, "eval_iou").ok()).collect();
            let iou: Vec<f64> = rs.iter().filter_map(|r| r.final_test_iou).collect();
            let loss: Vec<f64> = rs.iter().filter_map(|r| r.final_test_loss).collect();
            let (iou_mean, iou_std) = mean_std(&iou);
            let (test_loss_mean, test_loss_std) = mean_std(&loss);
            SummaryRow {
                pipeline,
                size,
                runs: rs.len(),
                convergence_step: mean_std(&conv).0,
                auc: mean_std(&auc).0,
                iou_mean,
                iou_std,
                test_loss_mean,
                test_loss_std,
            }
        })
        .collect()
}

/// Markdown tables: one row per (pipeline, size), then a power-law fit of
/// mean test loss against subset size for each pipeline with enough sizes.
pub fn summary_report(records: &[RunRecord]) -> String {
    let mut s = String::from(
        "| pipeline | size | runs | convergence step | AUC (eval IoU) | test IoU | test loss |\n\
         |---|---:|---:|---:|---:|---:|---:|\n",
    );
    let rows = summary_rows(records);
    for r in &rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.1} | {:.4} | {:.4} ± {:.4} | {:.4} ± {:.4} |",
            r.pipeline, r.size, r.runs, r.convergence_step, r.auc, r.iou_mean, r.iou_std, r.test_loss_mean, r.test_loss_std
        );
    }
    let mut by_kind: BTreeMap<PipelineKind, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let e = by_kind.entry(r.pipeline).or_default();
        e.0.push(r.size);
        e.1.push(r.test_loss_mean);
    }
    let fits: Vec<String> = by_kind
        .iter()
        .filter_map(|(k, (n, e))| {
            let fit = fit_power_law(n, e, None).ok()?;
            let tr = match detect_transition(n, e, DEFAULT_SLOPE_RATIO) {
                Ok(Some((a, b))) => format!("{a}–{b}"),
                Ok(None) => "none".into(),
                Err(_) => "n/a".into(),
            };
            Some(format!(
                "| {k} | {:.4} | {:.4} | {:.4} | {}–{} | {tr} |",
                fit.alpha, fit.c, fit.r_squared, fit.n_min, fit.n_max
            ))
        })
        .collect();
    if !fits.is_empty() {
        s.push_str("\n| pipeline | alpha | c | r² | fit range | transition |\n|---|---:|---:|---:|---|---|\n");
        for f in fits {
            s.push_str(&f);
            s.push('\n');
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub epoch: usize,
    pub runs: usize,
    pub convergence_step: f64,
    pub auc: f64,
}

/// Mean convergence step and eval-IoU AUC per pretraining epoch.
pub fn ablation_summary(records: &[AblationRecord]) -> Vec<AblationSummary> {
    let mut groups: BTreeMap<usize, Vec<&AblationRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == RunStatus::Done && !r.curve.is_empty()) {
        groups.entry(r.epoch).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(epoch, rs)| {
            let conv: Vec<f64> = rs
                .iter()
                .filter_map(|r| convergence_steps(&r.curve, DEFAULT_PLATEAU_FRACTION).ok())
                .map(|c| c.step as f64)
                .collect();
            let auc: Vec<f64> = rs.iter().filter_map(|r| curve_auc(&r.curve, "eval_iou").ok()).collect();
            AblationSummary { epoch, runs: rs.len(), convergence_step: mean_std(&conv).0, auc: mean_std(&auc).0 }
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#b07aa1"];

/// Colour of a pipeline, identical in every figure.
pub fn pipeline_color(kind: PipelineKind) -> &'static str {
    PALETTE[kind.index() as usize % PALETTE.len()]
}

struct Axes {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x: (f64, f64),
    y: (f64, f64),
    log_x: bool,
    log_y: bool,
    /// Explicit x tick positions; automatic when empty.
    x_ticks: Vec<f64>,
}

impl Axes {
    fn tx(&self, v: f64) -> f64 {
        let f = |v: f64| if self.log_x { v.max(1e-300).log10() } else { v };
        self.left + (f(v) - f(self.x.0)) / (f(self.x.1) - f(self.x.0)) * self.width
    }

    fn ty(&self, v: f64) -> f64 {
        let f = |v: f64| if self.log_y { v.max(1e-300).log10() } else { v };
        self.top + self.height - (f(v) - f(self.y.0)) / (f(self.y.1) - f(self.y.0)) * self.height
    }

    fn frame(&self, svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        let _ = writeln!(svg, r##"<rect x="{l}" y="{t}" width="{w}" height="{h}" fill="none" stroke="#333"/>"##);
        let _ = writeln!(svg, r##"<text x="{}" y="{}" text-anchor="middle" font-size="15">{}</text>"##, l + w / 2.0, t - 12.0, esc(title));
        let _ = writeln!(svg, r##"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"##, l + w / 2.0, t + h + 40.0, esc(xlabel));
        let _ = writeln!(
            svg,
            r##"<text x="{x}" y="{y}" text-anchor="middle" font-size="13" transform="rotate(-90 {x} {y})">{}</text>"##,
            esc(ylabel),
            x = l - 48.0,
            y = t + h / 2.0
        );
        let xt = if self.x_ticks.is_empty() { ticks(self.x, self.log_x) } else { self.x_ticks.clone() };
        for v in xt {
            let x = self.tx(v);
            let _ = writeln!(svg, r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="#333"/>"##, t + h, t + h + 5.0);
            let _ = writeln!(svg, r##"<text x="{x:.1}" y="{}" text-anchor="middle" font-size="11">{}</text>"##, t + h + 18.0, fmt_tick(v));
        }
        for v in ticks(self.y, self.log_y) {
            let y = self.ty(v);
            let _ = writeln!(svg, r##"<line x1="{}" y1="{y:.1}" x2="{l}" y2="{y:.1}" stroke="#333"/>"##, l - 5.0);
            let _ = writeln!(svg, r##"<line x1="{l}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, l + w);
            let _ = writeln!(svg, r##"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"##, l - 8.0, y + 4.0, fmt_tick(v));
        }
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.0e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn ticks(range: (f64, f64), log: bool) -> Vec<f64> {
    let (lo, hi) = range;
    if log {
        let (a, b) = (lo.log10().floor() as i32, hi.log10().ceil() as i32);
        let mut v: Vec<f64> = (a..=b).map(|e| 10f64.powi(e)).filter(|&x| x >= lo * 0.999 && x <= hi * 1.001).collect();
        if v.len() < 2 {
            v = (a..=b)
                .flat_map(|e| [1.0, 2.0, 5.0].map(|m| m * 10f64.powi(e)))
                .filter(|&x| x >= lo * 0.999 && x <= hi * 1.001)
                .collect();
        }
        if v.len() < 2 {
            v = ticks(range, false).into_iter().filter(|&x| x > 0.0).collect();
        }
        return v;
    }
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|&s| s >= raw).unwrap_or(10.0 * mag);
    let mut v = Vec::new();
    let mut x = (lo / step).ceil() * step;
    while x <= hi + step * 1e-9 {
        v.push(if x.abs() < step * 1e-9 { 0.0 } else { x });
        x += step;
    }
    v
}

fn legend(svg: &mut String, x: f64, y: f64, kinds: &[PipelineKind]) {
    for (i, k) in kinds.iter().enumerate() {
        let yy = y + i as f64 * 18.0;
        let _ = writeln!(svg, r##"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/>"##, yy - 10.0, pipeline_color(*k));
        let _ = writeln!(svg, r##"<text x="{}" y="{yy}" font-size="11">{}</text>"##, x + 18.0, k.name());
    }
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"DejaVu Sans, sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn learning_curve_svg(records: &[RunRecord], size: usize) -> String {
    let bands = curve_bands(records, size);
    let (w, h) = (860.0, 460.0);
    let mut svg = svg_open(w, h);
    let xmax = bands.values().flat_map(|b| b.steps.last()).copied().max().unwrap_or(1) as f64;
    let xmin = bands.values().flat_map(|b| b.steps.first()).copied().min().unwrap_or(0) as f64;
    let ax = Axes { left: 70.0, top: 40.0, width: 560.0, height: 350.0, x: (xmin.min(xmax - 1.0), xmax), y: (0.0, 1.0), log_x: false, log_y: false, x_ticks: vec![] };
    ax.frame(&mut svg, &format!("Eval IoU during fine-tuning (n = {size}, mean ± std)"), "step", "IoU");
    for (k, b) in &bands {
        let c = pipeline_color(*k);
        let upper: Vec<String> = b.steps.iter().zip(b.mean.iter().zip(&b.std)).map(|(&s, (m, d))| format!("{:.1},{:.1}", ax.tx(s as f64), ax.ty((m + d).min(1.0)))).collect();
        let lower: Vec<String> = b.steps.iter().zip(b.mean.iter().zip(&b.std)).rev().map(|(&s, (m, d))| format!("{:.1},{:.1}", ax.tx(s as f64), ax.ty((m - d).max(0.0)))).collect();
        let _ = writeln!(svg, r##"<polygon points="{} {}" fill="{c}" fill-opacity="0.2" stroke="none"/>"##, upper.join(" "), lower.join(" "));
        let line: Vec<String> = b.steps.iter().zip(&b.mean).map(|(&s, m)| format!("{:.1},{:.1}", ax.tx(s as f64), ax.ty(*m))).collect();
        let _ = writeln!(svg, r##"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"##, line.join(" "));
    }
    legend(&mut svg, 645.0, 60.0, &bands.keys().copied().collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Gaussian kernel density on `grid` with Silverman's bandwidth.
fn bandwidth(values: &[f64]) -> f64 {
    (1.06 * mean_std(values).1 * (values.len() as f64).powf(-0.2)).max(1e-6)
}

fn kde(values: &[f64], grid: &[f64]) -> Vec<f64> {
    let bw = bandwidth(values);
    grid.iter()
        .map(|&g| values.iter().map(|&v| (-0.5 * ((g - v) / bw).powi(2)).exp()).sum::<f64>())
        .collect()
}

fn auc_violin_svg(records: &[RunRecord], size: usize) -> String {
    let aucs = auc_by_pipeline(records, size);
    let order = auc_order(&aucs);
    let (w, h) = (860.0, 460.0);
    let mut svg = svg_open(w, h);
    // room for the density tails of every violin
    let spread = |v: &Vec<f64>| if v.len() >= 2 && mean_std(v).1 > 0.0 { 2.0 * bandwidth(v) } else { 0.0 };
    let lo = aucs.values().flat_map(|v| v.iter().map(move |x| x - spread(v))).fold(f64::INFINITY, f64::min).max(0.0);
    let hi = aucs.values().flat_map(|v| v.iter().map(move |x| x + spread(v))).fold(f64::NEG_INFINITY, f64::max).min(1.0);
    let pad = ((hi - lo) * 0.05).max(0.01);
    let ax = Axes { left: 70.0, top: 40.0, width: 740.0, height: 330.0, x: (0.0, order.len().max(1) as f64), y: (lo - pad, hi + pad), log_x: false, log_y: false, x_ticks: vec![] };
    let (l, t, aw, ah) = (ax.left, ax.top, ax.width, ax.height);
    let _ = writeln!(svg, r##"<rect x="{l}" y="{t}" width="{aw}" height="{ah}" fill="none" stroke="#333"/>"##);
    let _ = writeln!(svg, r##"<text x="{}" y="{}" text-anchor="middle" font-size="15">Area under eval IoU curve (n = {size}), ordered by median</text>"##, l + aw / 2.0, t - 12.0);
    let _ = writeln!(svg, r##"<text x="{x}" y="{y}" text-anchor="middle" font-size="13" transform="rotate(-90 {x} {y})">AUC</text>"##, x = l - 52.0, y = t + ah / 2.0);
    for v in ticks(ax.y, false) {
        let y = ax.ty(v);
        let _ = writeln!(svg, r##"<line x1="{}" y1="{y:.1}" x2="{l}" y2="{y:.1}" stroke="#333"/>"##, l - 5.0);
        let _ = writeln!(svg, r##"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"##, l - 8.0, y + 4.0, fmt_tick(v));
    }
    let slot = aw / order.len().max(1) as f64;
    for (i, k) in order.iter().enumerate() {
        let c = pipeline_color(*k);
        let cx = l + slot * (i as f64 + 0.5);
        let vals = &aucs[k];
        let (_, sd) = mean_std(vals);
        if vals.len() >= 2 && sd > 0.0 {
            let a = (vals.iter().copied().fold(f64::INFINITY, f64::min) - spread(vals)).max(0.0);
            let b = (vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) + spread(vals)).min(1.0);
            let grid: Vec<f64> = (0..=60).map(|j| a + (b - a) * j as f64 / 60.0).collect();
            let dens = kde(vals, &grid);
            let peak = dens.iter().copied().fold(0.0, f64::max).max(1e-12);
            let half = slot * 0.4;
            let right: Vec<String> = grid.iter().zip(&dens).map(|(g, d)| format!("{:.1},{:.1}", cx + half * d / peak, ax.ty(*g))).collect();
            let left: Vec<String> = grid.iter().zip(&dens).rev().map(|(g, d)| format!("{:.1},{:.1}", cx - half * d / peak, ax.ty(*g))).collect();
            let _ = writeln!(svg, r##"<polygon points="{} {}" fill="{c}" fill-opacity="0.5" stroke="{c}"/>"##, right.join(" "), left.join(" "));
            let m = median(&mut vals.clone());
            let _ = writeln!(svg, r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#000" stroke-width="2"/>"##, cx - slot * 0.15, cx + slot * 0.15, y = ax.ty(m));
        }
        for v in vals {
            let _ = writeln!(svg, r##"<circle cx="{cx:.1}" cy="{:.1}" r="3" fill="{c}" stroke="#000" stroke-width="0.5"/>"##, ax.ty(*v));
        }
        let _ = writeln!(svg, r##"<text x="{cx:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"##, t + ah + 18.0, k.name());
    }
    svg.push_str("</svg>\n");
    svg
}

fn test_loss_box_svg(records: &[RunRecord]) -> String {
    let mut groups: BTreeMap<(usize, PipelineKind), Vec<f64>> = BTreeMap::new();
    for r in done(records) {
        if let Some(l) = r.final_test_loss {
            groups.entry((r.subset_size, r.pipeline)).or_default().push(l.max(1e-6));
        }
    }
    let (w, h) = (860.0, 460.0);
    let mut svg = svg_open(w, h);
    let sizes: Vec<usize> = groups.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let kinds: Vec<PipelineKind> = groups.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let vals: Vec<f64> = groups.values().flatten().copied().collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (smin, smax) = (*sizes.first().unwrap_or(&1) as f64, *sizes.last().unwrap_or(&10) as f64);
    let ax = Axes {
        left: 70.0,
        top: 40.0,
        width: 560.0,
        height: 350.0,
        x: (smin / 1.6, smax * 1.6),
        y: (lo / 1.3, hi * 1.3),
        log_x: true,
        log_y: true,
        x_ticks: sizes.iter().map(|&n| n as f64).collect(),
    };
    ax.frame(&mut svg, "Test Jaccard loss vs labeled subset size", "labeled slices", "test loss");
    let group_w = 40.0;
    let bw = group_w / kinds.len().max(1) as f64;
    for ((size, kind), v) in &groups {
        let mut s = v.clone();
        s.sort_by(|a, b| a.total_cmp(b));
        let ki = kinds.iter().position(|k| k == kind).expect("listed") as f64;
        let x0 = ax.tx(*size as f64) - group_w / 2.0 + ki * bw;
        let xm = x0 + bw / 2.0;
        let c = pipeline_color(*kind);
        let (q1, q2, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
        let (mn, mx) = (s[0], s[s.len() - 1]);
        let _ = writeln!(svg, r##"<line x1="{xm:.1}" y1="{:.1}" x2="{xm:.1}" y2="{:.1}" stroke="#333"/>"##, ax.ty(mn), ax.ty(mx));
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{c}" stroke="#333"/>"##,
            x0 + 1.0,
            ax.ty(q3),
            (bw - 2.0).max(1.0),
            (ax.ty(q1) - ax.ty(q3)).max(1.0)
        );
        let _ = writeln!(svg, r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#000" stroke-width="2"/>"##, x0 + 1.0, x0 + bw - 1.0, y = ax.ty(q2));
    }
    legend(&mut svg, 645.0, 60.0, &kinds);
    svg.push_str("</svg>\n");
    svg
}

fn render_png(svg: &str, path: &Path) -> Result<()> {
    let mut opt = resvg::usvg::Options::default();
    opt.fontdb_mut().load_system_fonts();
    let tree = resvg::usvg::Tree::from_str(svg, &opt).map_err(|e| Error::Format(format!("svg: {e}")))?;
    let size = tree.size().to_int_size();
    let mut pixmap = resvg::tiny_skia::Pixmap::new(size.width(), size.height())
        .ok_or_else(|| Error::Format("empty figure".into()))?;
    resvg::render(&tree, resvg::tiny_skia::Transform::default(), &mut pixmap.as_mut());
    let png = pixmap.encode_png().map_err(|e| Error::Format(format!("png: {e}")))?;
    fs::write(path, png).map_err(|e| Error::io(path, e))
}

/// Writes curve bands, AUC violins and test-loss boxes as SVG and PNG.
pub fn emit_figures(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let size = headline_size(records).ok_or_else(|| Error::Argument("no completed records to plot".into()))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let figures = [
        ("learning_curves", learning_curve_svg(records, size)),
        ("auc_violin", auc_violin_svg(records, size)),
        ("test_loss_vs_size", test_loss_box_svg(records)),
    ];
    let mut out = Vec::new();
    for (name, svg) in figures {
        let sp = out_dir.join(format!("{name}.svg"));
        fs::write(&sp, &svg).map_err(|e| Error::io(&sp, e))?;
        let pp = out_dir.join(format!("{name}.png"));
        render_png(&svg, &pp)?;
        out.push(sp);
        out.push(pp);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn curve(steps: Vec<u64>, iou: Vec<f64>) -> LearningCurve {
        let n = steps.len();
        LearningCurve { steps, train_loss: vec![0.0; n], eval_iou: iou, eval_loss: vec![0.0; n] }
    }

    #[test]
    fn auc_closed_forms() {
        let c = curve(vec![0, 10, 20], vec![0.0, 1.0, 0.0]);
        assert!((curve_auc(&c, "eval_iou").unwrap() - 0.5).abs() < 1e-12);
        let c = curve(vec![5, 7, 100], vec![0.3, 0.3, 0.3]);
        assert!((curve_auc(&c, "eval_iou").unwrap() - 0.3).abs() < 1e-12);
        let xs: Vec<f64> = (0..=7).map(|i| 3.0 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x / 21.0).collect();
        assert!((normalized_auc(&xs, &ys).unwrap() - 0.5).abs() < 1e-12);
        assert!(curve_auc(&c, "nope").is_err());
    }

    #[test]
    fn auc_invariant_to_step_rescaling() {
        let mut rng = rng_from(1);
        let ys: Vec<f64> = (0..9).map(|_| rng.random()).collect();
        let xs: Vec<f64> = (0..9).map(|i| (i * i) as f64).collect();
        let scaled: Vec<f64> = xs.iter().map(|x| x * 37.5).collect();
        assert!((normalized_auc(&xs, &ys).unwrap() - normalized_auc(&scaled, &ys).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn convergence_of_exponential_approach() {
        let tau = 50.0;
        let steps: Vec<u64> = (1..=4000).collect();
        let ys: Vec<f64> = steps.iter().map(|&t| 1.0 - (-(t as f64) / tau).exp()).collect();
        let c = convergence_steps_raw(&steps, &ys, 0.95).unwrap();
        assert!(c.converged);
        assert!((c.step as f64 - tau * 20f64.ln()).abs() <= 1.0, "{}", c.step);
        let ys4: Vec<f64> = steps.iter().map(|&t| 1.0 - (-(t as f64) / (4.0 * tau)).exp()).collect();
        let c4 = convergence_steps_raw(&steps, &ys4, 0.95).unwrap();
        assert!((c4.step as f64 / c.step as f64 - 4.0).abs() < 0.1);
        let flat = convergence_steps_raw(&[3, 6, 9], &[0.4, 0.4, 0.4], 0.95).unwrap();
        assert_eq!(flat.step, 3);
    }

    #[test]
    fn convergence_monotone_in_fraction() {
        let steps: Vec<u64> = (1..=200).collect();
        let ys: Vec<f64> = steps.iter().map(|&t| (t as f64 / 200.0).sqrt()).collect();
        let mut last = 0;
        for f in [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99] {
            let c = convergence_steps_raw(&steps, &ys, f).unwrap().step;
            assert!(c >= last);
            last = c;
        }
    }

    #[test]
    fn power_law_recovery() {
        let sizes = [10, 100, 1000];
        let errs: Vec<f64> = sizes.iter().map(|&n| 3.0 * (n as f64).powf(-0.5)).collect();
        let f = fit_power_law(&sizes, &errs, None).unwrap();
        assert!((f.alpha - 0.5).abs() < 1e-12 && (f.c - 3.0).abs() < 1e-10 && (f.r_squared - 1.0).abs() < 1e-12);
        let flat = fit_power_law(&sizes, &[0.2, 0.2, 0.2], None).unwrap();
        assert!(flat.alpha.abs() < 1e-12);
        assert!(fit_power_law(&[10], &[0.1], None).is_err());
        assert!(fit_power_law(&[10, 20], &[0.1, -0.1], None).is_err());
    }

    #[test]
    fn power_law_under_noise() {
        let mut rng = rng_from(7);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let sizes: Vec<usize> = (0..8).map(|i| (10.0 * 10f64.powf(i as f64 * 3.0 / 7.0)).round() as usize).collect();
        for _ in 0..100 {
            let errs: Vec<f64> = sizes.iter().map(|&n| 2.0 * (n as f64).powf(-0.5) * (1.0 + noise.sample(&mut rng))).collect();
            let f = fit_power_law(&sizes, &errs, None).unwrap();
            assert!((f.alpha - 0.5).abs() < 0.05, "{}", f.alpha);
        }
    }

    fn piecewise(n: f64) -> f64 {
        if n <= 50.0 {
            n.powf(-1.0)
        } else {
            50f64.powf(-1.0) * (n / 50.0).powf(-0.1)
        }
    }

    #[test]
    fn transition_brackets_breakpoint() {
        let sizes: Vec<usize> = (0..8).map(|k| 5 << k).collect();
        let errs: Vec<f64> = sizes.iter().map(|&n| piecewise(n as f64)).collect();
        let (a, b) = detect_transition(&sizes, &errs, 0.5).unwrap().unwrap();
        assert!(a <= 50 && 50 <= b && sizes.contains(&a) && sizes.contains(&b));
        let pure: Vec<f64> = sizes.iter().map(|&n| (n as f64).powf(-0.7)).collect();
        assert_eq!(detect_transition(&sizes, &pure, 0.5).unwrap(), None);
        assert!(detect_transition(&sizes[..3], &errs[..3], 0.5).is_err());
    }

    fn record(kind: PipelineKind, size: usize, seed: u64, iou: Vec<f64>) -> RunRecord {
        let steps = (1..=iou.len() as u64).map(|s| s * 10).collect();
        RunRecord {
            pipeline: kind,
            subset_size: size,
            seed,
            status: RunStatus::Done,
            error: None,
            subset: vec![],
            curve: curve(steps, iou),
            final_test_loss: Some(0.5 / (size as f64).sqrt() + 0.01 * seed as f64),
            final_test_iou: Some(0.5),
            wall_clock_seconds: 0.0,
        }
    }

    #[test]
    fn bands_use_sample_std() {
        let rs: Vec<RunRecord> = (0..10)
            .map(|s| record(PipelineKind::ByolDomain, 8, s, vec![0.1 * s as f64, 0.5, 0.6]))
            .collect();
        let b = &curve_bands(&rs, 8)[&PipelineKind::ByolDomain];
        let v: Vec<f64> = (0..10).map(|s| 0.1 * s as f64).collect();
        assert!((b.std[0] - mean_std(&v).1).abs() < 1e-12);
        assert_eq!(b.std[1], 0.0);
        let single = curve_bands(&rs[..1], 8);
        assert!(single[&PipelineKind::ByolDomain].std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn violin_order_follows_medians() {
        let mut rs = Vec::new();
        for (k, base) in [(PipelineKind::RandomInit, 0.6), (PipelineKind::ByolDomain, 0.2), (PipelineKind::SupImagenet, 0.4)] {
            for s in 0..5 {
                rs.push(record(k, 4, s, vec![base, base + 0.01 * s as f64]));
            }
        }
        let aucs = auc_by_pipeline(&rs, 4);
        let order = auc_order(&aucs);
        let mut meds: Vec<(f64, PipelineKind)> = aucs.iter().map(|(k, v)| (median(&mut v.clone()), *k)).collect();
        meds.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(order, meds.into_iter().map(|m| m.1).collect::<Vec<_>>());
        assert_eq!(order[0], PipelineKind::ByolDomain);
    }

    #[test]
    fn report_rows_and_empty_header() {
        let empty = summary_report(&[]);
        assert_eq!(empty.lines().count(), 2);
        let one = summary_report(&[record(PipelineKind::RandomInit, 4, 0, vec![0.2, 0.4])]);
        assert_eq!(one.lines().count(), 3);
        let rs: Vec<RunRecord> = [1, 2, 4, 8].iter().map(|&n| record(PipelineKind::RandomInit, n, 0, vec![0.2, 0.4])).collect();
        let rows = summary_rows(&rs);
        assert_eq!(rows.len(), 4);
        let auc = curve_auc(&rs[0].curve, "eval_iou").unwrap();
        assert!((rows[0].auc - auc).abs() < 1e-12);
        assert!(summary_report(&rs).contains("| alpha |"));
    }

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut rs = Vec::new();
        for k in [PipelineKind::RandomInit, PipelineKind::ByolDomain] {
            for n in [2, 8] {
                for s in 0..3 {
                    rs.push(record(k, n, s, vec![0.2, 0.5 + 0.05 * s as f64, 0.7]));
                }
            }
        }
        let files = emit_figures(&rs, dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        for f in files {
            assert!(fs::metadata(&f).unwrap().len() > 100, "{}", f.display());
        }
        let svg = fs::read_to_string(dir.path().join("learning_curves.svg")).unwrap();
        assert!(svg.contains(pipeline_color(PipelineKind::ByolDomain)));
    }
}
