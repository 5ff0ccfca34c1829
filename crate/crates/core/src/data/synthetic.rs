//! Concentric-ellipse cardiac phantoms.
//!
//! Each patient gets a jittered geometry: an inner disk (LV), a middle ring
//! (MYO) and an outer ring (RV) inside a faint body disk. Over the cycle the
//! cavity contracts (ED at frame 0, ES at the most contracted frame) and the
//! myocardium thickens; basal-to-apical slices shrink the cavity. Intensities
//! are quantized to 16 bits so images survive a PNG round trip bit-exactly.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::seeding::derive_rng;

use super::{FrameTag, Image, Mask, SemiSupervisedDataset, SliceRecord, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub frames_per_cycle: usize,
    pub slices_per_frame: usize,
    pub image_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_patients: 10, frames_per_cycle: 25, slices_per_frame: 10, image_size: 64, seed: 0 }
    }
}

struct PatientGeometry {
    cx: f64,
    cy: f64,
    angle: f64,
    ax: f64,
    ay: f64,
    lv_radius: f64,
    myo_thickness: f64,
    rv_thickness: f64,
    body_radius: f64,
    contraction: f64,
    intensity: [f64; 5],
}

impl PatientGeometry {
    fn draw<R: Rng>(rng: &mut R, s: f64) -> Self {
        let ax = rng.random_range(0.9..1.1);
        Self {
            cx: s * (0.5 + rng.random_range(-0.06..0.06)),
            cy: s * (0.5 + rng.random_range(-0.06..0.06)),
            angle: rng.random_range(0.0..PI),
            ax,
            ay: 1.0 / ax,
            lv_radius: s * rng.random_range(0.11..0.14),
            myo_thickness: s * rng.random_range(0.06..0.075),
            rv_thickness: s * rng.random_range(0.065..0.085),
            body_radius: s * rng.random_range(0.42..0.47),
            contraction: rng.random_range(0.2..0.3),
            // outside, body, RV, MYO, LV
            intensity: [
                rng.random_range(0.0..0.05),
                rng.random_range(0.15..0.25),
                rng.random_range(0.55..0.7),
                rng.random_range(0.3..0.4),
                rng.random_range(0.75..0.9),
            ],
        }
    }
}

/// Frame index of end-systole: the most contracted frame of the cycle.
pub fn es_frame(frames_per_cycle: usize) -> usize {
    frames_per_cycle / 2
}

fn quantize(v: f64) -> f32 {
    let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    q as f32 / 65535.0
}

fn render(
    g: &PatientGeometry,
    size: usize,
    frame: usize,
    frames: usize,
    slice: usize,
    slices: usize,
    noise: &mut impl FnMut() -> f64,
) -> (Image, Mask) {
    // 1 at ED, 1 - contraction at mid-cycle
    let phase = 1.0 - g.contraction * (1.0 - (2.0 * PI * frame as f64 / frames as f64).cos()) / 2.0;
    let apical = if slices > 1 { slice as f64 / (slices - 1) as f64 } else { 0.0 };
    let slice_scale = 1.0 - 0.3 * apical;
    let r_lv = g.lv_radius * phase * slice_scale;
    let r_myo = r_lv + g.myo_thickness * (1.0 + 0.5 * (1.0 - phase));
    let r_rv = r_myo + g.rv_thickness * (0.7 + 0.3 * phase);
    let (sin, cos) = g.angle.sin_cos();
    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - g.cx;
            let dy = y as f64 + 0.5 - g.cy;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let r = ((u / g.ax).powi(2) + (v / g.ay).powi(2)).sqrt();
            let class = if r < r_lv {
                3
            } else if r < r_myo {
                2
            } else if r < r_rv {
                1
            } else {
                0
            };
            let base = match class {
                3 => g.intensity[4],
                2 => g.intensity[3],
                1 => g.intensity[2],
                _ if (dx * dx + dy * dy).sqrt() < g.body_radius => g.intensity[1],
                _ => g.intensity[0],
            };
            image.push(quantize(base + noise()));
            mask.push(class);
        }
    }
    (Image::new(size, size, image), Mask::new(size, size, mask))
}

/// Deterministic synthetic dataset of `n_patients * frames_per_cycle *
/// slices_per_frame` slices; frames 0 (ED) and the mid-cycle frame (ES) are
/// labeled.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SemiSupervisedDataset> {
    ensure(spec.n_patients >= 1 && spec.slices_per_frame >= 1, || {
        "n_patients and slices_per_frame must be >= 1".into()
    })?;
    ensure(spec.frames_per_cycle >= 2, || "frames_per_cycle must be >= 2".into())?;
    ensure(spec.image_size >= 16, || "image_size must be >= 16".into())?;
    let size = spec.image_size;
    let es = es_frame(spec.frames_per_cycle);
    let normal = Normal::new(0.0, 0.03).expect("valid normal");
    let mut slices = Vec::with_capacity(spec.n_patients * spec.frames_per_cycle * spec.slices_per_frame);
    for p in 0..spec.n_patients {
        let mut rng = derive_rng(spec.seed, "synthetic-patient", &[p as u64]);
        let geom = PatientGeometry::draw(&mut rng, size as f64);
        let patient_id = format!("P{p:03}");
        for f in 0..spec.frames_per_cycle {
            let tag = match f {
                0 => FrameTag::ED,
                _ if f == es => FrameTag::ES,
                _ => FrameTag::Other,
            };
            for s in 0..spec.slices_per_frame {
                let mut noise = || normal.sample(&mut rng);
                let (image, mask) =
                    render(&geom, size, f, spec.frames_per_cycle, s, spec.slices_per_frame, &mut noise);
                let mask = tag.is_labeled().then_some(mask);
                slices.push(SliceRecord::new(image, mask, patient_id.clone(), tag, f, s)?);
            }
        }
    }
    Ok(SemiSupervisedDataset::new(slices, Split::Train))
}
