//! Stochastic view generation. Geometry (square crop, resize, horizontal
//! flip) is shared between an image and its mask; brightness and contrast
//! touch the image only. Every chain draws the same six numbers regardless of
//! configuration so the rng advances identically for any config.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub output_size: usize,
    /// Area fraction of the shorter side's square kept by the crop.
    pub crop_scale_range: (f64, f64),
    pub hflip_prob: f64,
    pub brightness_delta_max: f64,
    pub contrast_factor_range: (f64, f64),
}

impl Default for AugmentConfig {
    /// Defaults are configuration choices, not tuned values.
    fn default() -> Self {
        Self {
            output_size: 64,
            crop_scale_range: (0.4, 1.0),
            hflip_prob: 0.5,
            brightness_delta_max: 0.4,
            contrast_factor_range: (0.6, 1.4),
        }
    }
}

impl AugmentConfig {
    /// No-op chain apart from resizing to `output_size`.
    pub fn identity(output_size: usize) -> Self {
        Self {
            output_size,
            crop_scale_range: (1.0, 1.0),
            hflip_prob: 0.0,
            brightness_delta_max: 0.0,
            contrast_factor_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (slo, shi) = self.crop_scale_range;
        let (clo, chi) = self.contrast_factor_range;
        ensure(self.output_size >= 1, || "output_size must be >= 1".into())?;
        ensure(slo > 0.0 && slo <= shi && shi <= 1.0, || {
            format!("crop_scale_range must satisfy 0 < lo <= hi <= 1, got ({slo}, {shi})")
        })?;
        ensure((0.0..=1.0).contains(&self.hflip_prob), || format!("hflip_prob {} not in [0,1]", self.hflip_prob))?;
        ensure(self.brightness_delta_max >= 0.0, || "brightness_delta_max must be >= 0".into())?;
        ensure(clo > 0.0 && clo <= chi, || format!("contrast_factor_range must satisfy 0 < lo <= hi, got ({clo}, {chi})"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub flip: bool,
}

impl Geometry {
    pub fn center(height: usize, width: usize, side: usize) -> Self {
        let side = side.clamp(1, height.min(width));
        Self { top: (height - side) / 2, left: (width - side) / 2, side, flip: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub geometry: Geometry,
    pub photometric: Photometric,
}

fn lerp(range: (f64, f64), u: f64) -> f64 {
    range.0 + (range.1 - range.0) * u
}

/// Draws one set of chain parameters for an image of the given shape.
pub fn draw_params<R: Rng + ?Sized>(height: usize, width: usize, cfg: &AugmentConfig, rng: &mut R) -> AugmentParams {
    let u: [f64; 6] = std::array::from_fn(|_| rng.random::<f64>());
    let short = height.min(width);
    let scale = lerp(cfg.crop_scale_range, u[0]);
    let side = ((scale.sqrt() * short as f64).round() as usize).clamp(1, short);
    let top = ((u[1] * (height - side + 1) as f64) as usize).min(height - side);
    let left = ((u[2] * (width - side + 1) as f64) as usize).min(width - side);
    AugmentParams {
        geometry: Geometry { top, left, side, flip: u[3] < cfg.hflip_prob },
        photometric: Photometric {
            brightness: cfg.brightness_delta_max * (2.0 * u[4] - 1.0),
            contrast: lerp(cfg.contrast_factor_range, u[5]),
        },
    }
}

fn flipped(d: usize, out: usize, g: &Geometry) -> usize {
    if g.flip {
        out - 1 - d
    } else {
        d
    }
}

/// Crops, flips and bilinearly resizes an image (half-pixel centers).
pub fn warp_image(img: &Image, g: &Geometry, out: usize) -> Image {
    let ratio = g.side as f64 / out as f64;
    let coords = |d: usize| {
        let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (g.side - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(g.side - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..out).map(coords).collect();
    let mut data = Vec::with_capacity(out * out);
    for y in 0..out {
        let (y0, y1, fy) = coords(y);
        for x in 0..out {
            let (x0, x1, fx) = cols[flipped(x, out, g)];
            let p = |yy: usize, xx: usize| img.at(g.top + yy, g.left + xx);
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Image::new(out, out, data)
}

/// Same geometry as [`warp_image`] with nearest-neighbour sampling.
pub fn warp_mask(mask: &Mask, g: &Geometry, out: usize) -> Mask {
    let nn = |d: usize| (((d as f64 + 0.5) * g.side as f64 / out as f64).floor() as usize).min(g.side - 1);
    let cols: Vec<_> = (0..out).map(nn).collect();
    let mut data = Vec::with_capacity(out * out);
    for y in 0..out {
        let sy = nn(y);
        for x in 0..out {
            data.push(mask.at(g.top + sy, g.left + cols[flipped(x, out, g)]));
        }
    }
    Mask::new(out, out, data)
}

/// Brightness shift, contrast scaling around the image mean, then a single
/// clamp to [0,1].
pub fn apply_photometric(img: &mut Image, p: &Photometric) {
    let b = p.brightness as f32;
    let c = p.contrast as f32;
    for v in &mut img.data {
        *v += b;
    }
    if c != 1.0 {
        let mean = (img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64) as f32;
        for v in &mut img.data {
            *v = (*v - mean) * c + mean;
        }
    }
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
}

pub fn apply_to_image(img: &Image, p: &AugmentParams, out: usize) -> Image {
    let mut v = warp_image(img, &p.geometry, out);
    apply_photometric(&mut v, &p.photometric);
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Image,
    pub view2: Image,
}

pub fn make_view_pair<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<ViewPair> {
    ensure(!image.data.is_empty(), || "cannot augment an empty image".into())?;
    let p1 = draw_params(image.height, image.width, cfg, rng);
    let p2 = draw_params(image.height, image.width, cfg, rng);
    Ok(ViewPair { view1: apply_to_image(image, &p1, cfg.output_size), view2: apply_to_image(image, &p2, cfg.output_size) })
}

/// One draw of the chain applied jointly: shared geometry, photometric on the
/// image only.
pub fn augment_labeled_pair<R: Rng + ?Sized>(
    image: &Image,
    mask: &Mask,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Image, Mask)> {
    ensure(image.same_shape(mask), || {
        format!("image is {}x{} but mask is {}x{}", image.height, image.width, mask.height, mask.width)
    })?;
    ensure(!image.data.is_empty(), || "cannot augment an empty image".into())?;
    let p = draw_params(image.height, image.width, cfg, rng);
    Ok((apply_to_image(image, &p, cfg.output_size), warp_mask(mask, &p.geometry, cfg.output_size)))
}

/// Resize without any augmentation (evaluation path).
pub fn resize_pair(image: &Image, mask: Option<&Mask>, out: usize) -> (Image, Option<Mask>) {
    let g = Geometry::center(image.height, image.width, image.height.min(image.width));
    (warp_image(image, &g, out), mask.map(|m| warp_mask(m, &g, out)))
}
