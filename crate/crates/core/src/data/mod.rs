//! Semi-supervised 2D slice datasets: labeled ED/ES frames inside mostly
//! unlabeled cardiac cycles.

mod directory;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_from;
use crate::tensor::Tensor;

pub use directory::{load_directory_dataset, write_directory_dataset, MANIFEST_NAME};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "RV", "MYO", "LV"];

/// Row-major 2D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(height * width, data.len(), "plane data length mismatch");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn same_shape<U>(&self, other: &Plane<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Stacks equally sized images into a `B x 1 x H x W` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor<f32> {
    let mut data = Vec::new();
    let mut hw = None;
    let mut b = 0;
    for img in images {
        let shape = (img.height, img.width);
        assert!(hw.is_none_or(|s| s == shape), "images in a batch must share a shape");
        hw = Some(shape);
        data.extend_from_slice(&img.data);
        b += 1;
    }
    let (h, w) = hw.unwrap_or((0, 0));
    Tensor::from_vec(&[b, 1, h, w], data)
}

pub type Image = Plane<f32>;
pub type Mask = Plane<u8>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrameTag {
    ED,
    ES,
    #[serde(rename = "OTHER")]
    Other,
}

impl FrameTag {
    pub fn is_labeled(self) -> bool {
        matches!(self, FrameTag::ED | FrameTag::ES)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ED" => Some(FrameTag::ED),
            "ES" => Some(FrameTag::ES),
            "OTHER" => Some(FrameTag::Other),
            _ => None,
        }
    }
}

impl fmt::Display for FrameTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameTag::ED => "ED",
            FrameTag::ES => "ES",
            FrameTag::Other => "OTHER",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    image: Image,
    mask: Option<Mask>,
    patient_id: String,
    frame_tag: FrameTag,
    frame_index: usize,
    slice_index: usize,
}

impl SliceRecord {
    /// Validates the record invariants: a mask exists exactly for ED/ES
    /// frames, matches the image shape, and only holds class ids 0..=3.
    pub fn new(
        image: Image,
        mask: Option<Mask>,
        patient_id: impl Into<String>,
        frame_tag: FrameTag,
        frame_index: usize,
        slice_index: usize,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if mask.is_some() != frame_tag.is_labeled() {
            return Err(Error::Argument(format!(
                "patient {patient_id} frame {frame_index} slice {slice_index}: frame tag {frame_tag} {} a mask",
                if mask.is_some() { "must not have" } else { "requires" }
            )));
        }
        if let Some(m) = &mask {
            if !m.same_shape(&image) {
                return Err(Error::Argument(format!(
                    "mask shape {}x{} differs from image shape {}x{}",
                    m.height, m.width, image.height, image.width
                )));
            }
            if let Some(bad) = m.data.iter().find(|&&c| c as usize >= NUM_CLASSES) {
                return Err(Error::Argument(format!("mask contains invalid class id {bad}")));
            }
        }
        if image.data.is_empty() {
            return Err(Error::Argument("empty image".into()));
        }
        Ok(Self { image, mask, patient_id, frame_tag, frame_index, slice_index })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }
    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }
    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }
    pub fn frame_tag(&self) -> FrameTag {
        self.frame_tag
    }
    pub fn frame_index(&self) -> usize {
        self.frame_index
    }
    pub fn slice_index(&self) -> usize {
        self.slice_index
    }
}

/// Immutable collection of slices with its labeled subset.
#[derive(Clone, Debug, PartialEq)]
pub struct SemiSupervisedDataset {
    slices: Vec<SliceRecord>,
    labeled: Vec<usize>,
    split: Split,
}

impl SemiSupervisedDataset {
    pub fn new(slices: Vec<SliceRecord>, split: Split) -> Self {
        let labeled = slices.iter().enumerate().filter(|(_, s)| s.mask.is_some()).map(|(i, _)| i).collect();
        Self { slices, labeled, split }
    }

    pub fn empty(split: Split) -> Self {
        Self::new(Vec::new(), split)
    }

    pub fn slices(&self) -> &[SliceRecord] {
        &self.slices
    }
    pub fn slice(&self, i: usize) -> &SliceRecord {
        &self.slices[i]
    }
    pub fn len(&self) -> usize {
        self.slices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
    pub fn labeled_indices(&self) -> &[usize] {
        &self.labeled
    }
    pub fn split(&self) -> Split {
        self.split
    }

    pub fn patient_ids(&self) -> BTreeSet<&str> {
        self.slices.iter().map(|s| s.patient_id()).collect()
    }

    /// Image side length, if all slices are square and equally sized.
    pub fn image_size(&self) -> Option<usize> {
        let first = self.slices.first()?;
        let s = first.image.height;
        self.slices.iter().all(|r| r.image.height == s && r.image.width == s).then_some(s)
    }
}

/// Patient-disjoint train/validation/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDatasets {
    pub train: SemiSupervisedDataset,
    pub val: SemiSupervisedDataset,
    pub test: SemiSupervisedDataset,
}

impl SplitDatasets {
    pub fn get(&self, split: Split) -> &SemiSupervisedDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &SemiSupervisedDataset> {
        [&self.train, &self.val, &self.test].into_iter()
    }

    pub fn patients_disjoint(&self) -> bool {
        let (a, b, c) = (self.train.patient_ids(), self.val.patient_ids(), self.test.patient_ids());
        a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c)
    }
}

/// Fractions of patients assigned to each split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.70, val: 0.15, test: 0.15 }
    }
}

/// Seeded patient-level split. Validation and test each get
/// `floor(fraction * patients)` patients (at least one when there are three
/// or more patients); training keeps the rest.
pub fn split_by_patient(ds: &SemiSupervisedDataset, fr: SplitFractions, seed: u64) -> Result<SplitDatasets> {
    if fr.train <= 0.0 || fr.val < 0.0 || fr.test < 0.0 {
        return Err(Error::Argument(format!("invalid split fractions {fr:?}")));
    }
    let mut patients: Vec<&str> = ds.patient_ids().into_iter().collect();
    let n = patients.len();
    let count = |f: f64| {
        let c = (f / (fr.train + fr.val + fr.test) * n as f64).floor() as usize;
        if n >= 3 && f > 0.0 {
            c.max(1)
        } else {
            c
        }
    };
    let (n_val, n_test) = (count(fr.val), count(fr.test));
    let mut rng = rng_from(seed);
    rand::seq::SliceRandom::shuffle(patients.as_mut_slice(), &mut rng);
    let mut assign: BTreeMap<&str, Split> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        let split = if i < n_val {
            Split::Val
        } else if i < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
        assign.insert(p, split);
    }
    let pick = |split: Split| {
        let slices = ds.slices.iter().filter(|s| assign[s.patient_id()] == split).cloned().collect();
        SemiSupervisedDataset::new(slices, split)
    };
    Ok(SplitDatasets { train: pick(Split::Train), val: pick(Split::Val), test: pick(Split::Test) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubsetSize {
    Count(usize),
    Fraction(f64),
}

impl SubsetSize {
    /// Number of slices selected from `labeled` labeled slices; fractions
    /// round up so a positive fraction never selects nothing.
    pub fn resolve(self, labeled: usize) -> Result<usize> {
        match self {
            SubsetSize::Count(0) => Err(Error::Argument("subset count must be >= 1".into())),
            SubsetSize::Count(c) if c > labeled => {
                Err(Error::Argument(format!("subset of {c} requested but only {labeled} labeled slices exist")))
            }
            SubsetSize::Count(c) => Ok(c),
            SubsetSize::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(Error::Argument(format!("subset fraction must lie in (0, 1], got {f}")))
            }
            SubsetSize::Fraction(_) if labeled == 0 => Err(Error::Argument("dataset has no labeled slices".into())),
            SubsetSize::Fraction(f) => Ok(((f * labeled as f64 - 1e-9).ceil() as usize).clamp(1, labeled)),
        }
    }
}

impl fmt::Display for SubsetSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubsetSize::Count(c) => write!(f, "{c}"),
            SubsetSize::Fraction(x) => write!(f, "{:.2}%", x * 100.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsetSpec {
    pub size: SubsetSize,
    pub seed: u64,
}

/// Uniform sample without replacement from the labeled slices, ignoring
/// patient boundaries. Returned indices are sorted.
pub fn sample_labeled_subset(ds: &SemiSupervisedDataset, spec: SubsetSpec) -> Result<Vec<usize>> {
    let labeled = ds.labeled_indices();
    let k = spec.size.resolve(labeled.len())?;
    let mut rng = rng_from(spec.seed);
    let mut out: Vec<usize> = index::sample(&mut rng, labeled.len(), k).into_iter().map(|i| labeled[i]).collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub split: Split,
    pub n_slices: usize,
    pub n_labeled: usize,
    pub n_patients: usize,
    pub labeled_fraction: f64,
    /// Pixel frequency of each class over all masks, summing to one (all
    /// zero when there are no masks).
    pub class_frequencies: [f64; NUM_CLASSES],
}

pub fn dataset_stats(ds: &SemiSupervisedDataset) -> DatasetStats {
    let mut counts = [0u64; NUM_CLASSES];
    for &i in ds.labeled_indices() {
        for &c in &ds.slices[i].mask.as_ref().expect("labeled slice has a mask").data {
            counts[c as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let mut freq = [0.0; NUM_CLASSES];
    if total > 0 {
        for (f, c) in freq.iter_mut().zip(counts) {
            *f = c as f64 / total as f64;
        }
    }
    DatasetStats {
        split: ds.split,
        n_slices: ds.len(),
        n_labeled: ds.labeled_indices().len(),
        n_patients: ds.patient_ids().len(),
        labeled_fraction: if ds.is_empty() { 0.0 } else { ds.labeled_indices().len() as f64 / ds.len() as f64 },
        class_frequencies: freq,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(patient: &str, tag: FrameTag, mask_value: u8) -> SliceRecord {
        let image = Image::filled(4, 4, 0.5);
        let mask = tag.is_labeled().then(|| Mask::filled(4, 4, mask_value));
        SliceRecord::new(image, mask, patient, tag, 0, 0).unwrap()
    }

    fn labeled_dataset(n: usize) -> SemiSupervisedDataset {
        let slices = (0..n).map(|i| record(&format!("P{}", i % 7), FrameTag::ED, 1)).collect();
        SemiSupervisedDataset::new(slices, Split::Train)
    }

    #[test]
    fn record_invariants_enforced() {
        let img = Image::filled(4, 4, 0.1);
        assert!(SliceRecord::new(img.clone(), None, "p", FrameTag::ED, 0, 0).is_err());
        assert!(SliceRecord::new(img.clone(), Some(Mask::filled(4, 4, 0)), "p", FrameTag::Other, 0, 0).is_err());
        assert!(SliceRecord::new(img.clone(), Some(Mask::filled(4, 3, 0)), "p", FrameTag::ES, 0, 0).is_err());
        assert!(SliceRecord::new(img.clone(), Some(Mask::filled(4, 4, 4)), "p", FrameTag::ES, 0, 0).is_err());
        assert!(SliceRecord::new(img, Some(Mask::filled(4, 4, 3)), "p", FrameTag::ES, 0, 0).is_ok());
    }

    #[test]
    fn labeled_indices_track_masks() {
        let ds = SemiSupervisedDataset::new(
            vec![record("a", FrameTag::Other, 0), record("a", FrameTag::ED, 0), record("a", FrameTag::ES, 2)],
            Split::Train,
        );
        assert_eq!(ds.labeled_indices(), &[1, 2]);
    }

    #[test]
    fn subset_full_fraction_is_identity() {
        let ds = labeled_dataset(20);
        let all = sample_labeled_subset(&ds, SubsetSpec { size: SubsetSize::Fraction(1.0), seed: 3 }).unwrap();
        assert_eq!(all, ds.labeled_indices());
    }

    #[test]
    fn subset_single_sample_and_errors() {
        let ds = labeled_dataset(20);
        let one = sample_labeled_subset(&ds, SubsetSpec { size: SubsetSize::Count(1), seed: 0 }).unwrap();
        assert_eq!(one.len(), 1);
        assert!(sample_labeled_subset(&ds, SubsetSpec { size: SubsetSize::Count(21), seed: 0 }).is_err());
        assert!(sample_labeled_subset(&ds, SubsetSpec { size: SubsetSize::Fraction(0.0), seed: 0 }).is_err());
    }

    #[test]
    fn two_percent_of_1900_is_38() {
        assert_eq!(SubsetSize::Fraction(0.02).resolve(1900).unwrap(), 38);
        assert_eq!(SubsetSize::Fraction(0.005).resolve(1900).unwrap(), 10);
        assert_eq!(SubsetSize::Fraction(0.001).resolve(10).unwrap(), 1);
    }

    #[test]
    fn stats_of_empty_and_background_datasets() {
        let empty = dataset_stats(&SemiSupervisedDataset::empty(Split::Val));
        assert_eq!((empty.n_slices, empty.n_labeled, empty.labeled_fraction), (0, 0, 0.0));
        assert_eq!(empty.class_frequencies, [0.0; 4]);
        let bg = SemiSupervisedDataset::new(vec![record("a", FrameTag::ED, 0)], Split::Train);
        assert_eq!(dataset_stats(&bg).class_frequencies, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn patient_split_is_disjoint_and_complete() {
        let ds = labeled_dataset(70);
        let s = split_by_patient(&ds, SplitFractions::default(), 9).unwrap();
        assert!(s.patients_disjoint());
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 70);
        assert!(!s.val.is_empty() && !s.test.is_empty());
        assert_eq!(s, split_by_patient(&ds, SplitFractions::default(), 9).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn subset_size_and_determinism(n in 1usize..200, f in 0.001f64..1.0, seed in 0u64..1000) {
            let ds = labeled_dataset(n);
            let spec = SubsetSpec { size: SubsetSize::Fraction(f), seed };
            let a = sample_labeled_subset(&ds, spec).unwrap();
            let expected = ((f * n as f64) - 1e-9).ceil().max(1.0) as usize;
            proptest::prop_assert_eq!(a.len(), expected.min(n));
            proptest::prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
            proptest::prop_assert_eq!(a, sample_labeled_subset(&ds, spec).unwrap());
        }
    }
}
