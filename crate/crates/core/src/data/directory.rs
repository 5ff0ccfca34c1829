//! Directory ingestion.
//!
//! ```text
//! root/
//!   manifest.txt
//!   P000/f000_s00.png        16- or 8-bit grayscale image
//!   P000/f000_s00_mask.png   8-bit raw class ids (labeled frames only)
//! ```
//!
//! The manifest has one line per image of whitespace-separated `key=value`
//! pairs; `#` starts a comment:
//!
//! ```text
//! file=P000/f000_s00.png patient=P000 split=train frame=ED frame_index=0 slice=0 mask=P000/f000_s00_mask.png
//! ```
//!
//! Required keys: `file`, `patient`, `split`, `frame`, `slice`. Optional:
//! `frame_index` (default 0) and `mask`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use log::warn;

use crate::error::{Error, Result};

use super::{FrameTag, Image, Mask, SemiSupervisedDataset, SliceRecord, Split, SplitDatasets};

pub const MANIFEST_NAME: &str = "manifest.txt";

const KEYS: [&str; 7] = ["file", "patient", "split", "frame", "frame_index", "slice", "mask"];

struct Entry {
    line: usize,
    file: String,
    patient: String,
    split: Split,
    frame: FrameTag,
    frame_index: usize,
    slice: usize,
    mask: Option<String>,
}

fn parse_manifest(text: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut kv = BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {line_no}: expected key=value, got `{tok}`")))?;
            if !KEYS.contains(&k) {
                return Err(Error::Format(format!("manifest line {line_no}: unknown key `{k}`")));
            }
            if kv.insert(k, v).is_some() {
                return Err(Error::Format(format!("manifest line {line_no}: duplicate key `{k}`")));
            }
        }
        let req = |k: &str| {
            kv.get(k).copied().ok_or_else(|| Error::Format(format!("manifest line {line_no}: missing key `{k}`")))
        };
        let num = |k: &str, v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Format(format!("manifest line {line_no}: `{k}` must be an integer, got `{v}`")))
        };
        let split = Split::parse(req("split")?)
            .ok_or_else(|| Error::Format(format!("manifest line {line_no}: invalid split")))?;
        let frame = FrameTag::parse(req("frame")?)
            .ok_or_else(|| Error::Format(format!("manifest line {line_no}: frame must be ED, ES or OTHER")))?;
        entries.push(Entry {
            line: line_no,
            file: req("file")?.to_string(),
            patient: req("patient")?.to_string(),
            split,
            frame,
            frame_index: kv.get("frame_index").map(|v| num("frame_index", v)).transpose()?.unwrap_or(0),
            slice: num("slice", req("slice")?)?,
            mask: kv.get("mask").map(|s| s.to_string()),
        });
    }
    Ok(entries)
}

fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: expected 8- or 16-bit grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(Image::new(h, w, data))
}

fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match img {
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            Ok(Mask::new(h, w, b.into_raw()))
        }
        other => Err(Error::Integrity {
            path: path.to_path_buf(),
            message: format!("mask must be 8-bit grayscale, got {:?}", other.color()),
        }),
    }
}

fn dir_is_empty(path: &Path) -> bool {
    fs::read_dir(path).map(|mut it| it.next().is_none()).unwrap_or(false)
}

/// Loads a directory dataset into patient-disjoint splits with canonical
/// (patient, frame, slice) ordering.
pub fn load_directory_dataset(root: &Path) -> Result<SplitDatasets> {
    let manifest_path = root.join(MANIFEST_NAME);
    if !manifest_path.is_file() {
        return Err(Error::Format(format!("missing manifest {}", manifest_path.display())));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let entries = parse_manifest(&text)?;

    let mut skipped = BTreeSet::new();
    let subdirs = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for d in subdirs.flatten() {
        let p = d.path();
        if p.is_dir() && dir_is_empty(&p) {
            let name = d.file_name().to_string_lossy().into_owned();
            warn!("skipping empty patient directory {}", p.display());
            skipped.insert(name);
        }
    }

    let mut patient_split: BTreeMap<String, Split> = BTreeMap::new();
    let mut by_split: BTreeMap<Split, Vec<((String, usize, usize, String), SliceRecord)>> = BTreeMap::new();
    for e in entries {
        let top = e.file.split('/').next().unwrap_or("");
        if skipped.contains(top) || skipped.contains(&e.patient) {
            warn!("manifest line {}: patient {} skipped (empty directory)", e.line, e.patient);
            continue;
        }
        if let Some(prev) = patient_split.insert(e.patient.clone(), e.split) {
            if prev != e.split {
                return Err(Error::Integrity {
                    path: manifest_path.clone(),
                    message: format!("patient {} assigned to both {prev} and {}", e.patient, e.split),
                });
            }
        }
        let img_path = root.join(&e.file);
        if !img_path.is_file() {
            return Err(Error::Integrity { path: img_path, message: "image file listed in manifest is missing".into() });
        }
        let image = read_image(&img_path)?;
        let mask = match &e.mask {
            Some(m) => {
                let mp = root.join(m);
                if !mp.is_file() {
                    return Err(Error::Integrity { path: mp, message: "mask file listed in manifest is missing".into() });
                }
                let mask = read_mask(&mp)?;
                if !mask.same_shape(&image) {
                    return Err(Error::Integrity {
                        path: mp,
                        message: format!(
                            "mask is {}x{} but image {} is {}x{}",
                            mask.height, mask.width, e.file, image.height, image.width
                        ),
                    });
                }
                Some((mask, mp))
            }
            None => None,
        };
        let mask_path = mask.as_ref().map(|(_, p)| p.clone());
        let record = SliceRecord::new(image, mask.map(|(m, _)| m), e.patient.clone(), e.frame, e.frame_index, e.slice)
            .map_err(|err| Error::Integrity {
                path: mask_path.unwrap_or_else(|| PathBuf::from(&e.file)),
                message: err.to_string(),
            })?;
        by_split
            .entry(e.split)
            .or_default()
            .push(((e.patient.clone(), e.frame_index, e.slice, e.file.clone()), record));
    }

    let mut build = |split: Split| {
        let mut v = by_split.remove(&split).unwrap_or_default();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        SemiSupervisedDataset::new(v.into_iter().map(|(_, r)| r).collect(), split)
    };
    Ok(SplitDatasets { train: build(Split::Train), val: build(Split::Val), test: build(Split::Test) })
}

fn slice_stem(r: &SliceRecord) -> String {
    format!("f{:03}_s{:02}", r.frame_index(), r.slice_index())
}

/// Writes splits in the layout read by [`load_directory_dataset`]. Images are
/// stored as 16-bit PNG.
pub fn write_directory_dataset(splits: &SplitDatasets, root: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::from("# medpretrain dataset manifest v1\n");
    let mut written = Vec::new();
    for ds in splits.iter() {
        for r in ds.slices() {
            let dir = root.join(r.patient_id());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let stem = slice_stem(r);
            let rel = format!("{}/{stem}.png", r.patient_id());
            let img = r.image();
            let raw: Vec<u16> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(img.width as u32, img.height as u32, raw).expect("buffer size");
            let path = root.join(&rel);
            buf.save(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            written.push(path);
            let mut line = format!(
                "file={rel} patient={} split={} frame={} frame_index={} slice={}",
                r.patient_id(),
                ds.split(),
                r.frame_tag(),
                r.frame_index(),
                r.slice_index()
            );
            if let Some(m) = r.mask() {
                let mrel = format!("{}/{stem}_mask.png", r.patient_id());
                let mbuf: ImageBuffer<Luma<u8>, Vec<u8>> =
                    ImageBuffer::from_raw(m.width as u32, m.height as u32, m.data.clone()).expect("buffer size");
                let mpath = root.join(&mrel);
                mbuf.save(&mpath).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
                written.push(mpath);
                line.push_str(&format!(" mask={mrel}"));
            }
            manifest.push_str(&line);
            manifest.push('\n');
        }
    }
    let mp = root.join(MANIFEST_NAME);
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    written.push(mp);
    Ok(written)
}
