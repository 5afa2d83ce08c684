//! Turning segmentation sources into 2-D detection samples.
//!
//! Volumes are windowed per modality, cut along their first axis, replicated
//! to three channels, and every label value present in a slice becomes one
//! box spanning that label's pixel extrema. Splits are made per volume.

pub mod io;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array3, ArrayD, ArrayView2, ArrayViewD, Axis, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GroundTruthBox};

/// HU window applied to CT before scaling to 8 bits.
pub const CT_WINDOW: (f64, f64) = (-500.0, 1000.0);
/// Percentiles bounding the MRI window.
pub const MRI_PERCENTILES: (f64, f64) = (0.5, 99.5);

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("intensity array is empty")]
    EmptyImage,
    #[error("intensity array contains non-finite values")]
    NonFinite,
    #[error("image shape {image:?} does not match label shape {labels:?}")]
    ShapeMismatch { image: Vec<usize>, labels: Vec<usize> },
    #[error("unsupported array rank {0}; expected a 2-D image or a 3-D volume")]
    Rank(usize),
    #[error("label value {0} has no class name")]
    UnknownLabel(u32),
    #[error("validation fraction {0} must lie strictly between 0 and 1")]
    Fraction(f64),
    #[error("volume id {0:?} appears more than once")]
    DuplicateVolume(String),
    #[error("no volumes left for training after removing held-out classes")]
    EmptyTraining,
    #[error(transparent)]
    Io(#[from] io::IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    CT,
    MRI,
    XRay,
    Ultrasound,
    Histopathology,
    Dermoscopy,
    Fundoscopy,
    Endoscopy,
    Microscopy,
}

/// A source scan with its segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub volume_id: String,
    pub dataset_id: String,
    pub modality: Modality,
    /// `H x W`, `D x H x W`, or `H x W x 3` for colour images.
    pub image: ArrayD<f32>,
    /// Same spatial shape as `image`; 0 is background.
    pub labels: ArrayD<u32>,
    pub label_names: BTreeMap<u32, String>,
}

impl VolumeRecord {
    /// Class names of every non-background label that occurs in the volume.
    pub fn classes_present(&self) -> Result<BTreeSet<String>, CurationError> {
        let values: BTreeSet<u32> = self.labels.iter().copied().filter(|&v| v != 0).collect();
        values
            .into_iter()
            .map(|v| self.label_names.get(&v).cloned().ok_or(CurationError::UnknownLabel(v)))
            .collect()
    }

    pub fn summary(&self) -> Result<VolumeClasses, CurationError> {
        Ok(VolumeClasses { volume_id: self.volume_id.clone(), classes: self.classes_present()? })
    }
}

/// One 2-D detection sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub sample_id: String,
    pub dataset_id: String,
    pub modality: Modality,
    /// `H x W x 3`.
    pub image: Array3<u8>,
    pub annotations: Vec<GroundTruthBox>,
    pub source_volume_id: String,
}

impl SliceSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn classes(&self) -> BTreeSet<String> {
        self.annotations.iter().map(|a| a.class_name.clone()).collect()
    }
}

/// Linear-interpolated percentile of already sorted data, `p` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// The `(low, high)` window a modality clips to before scaling.
pub fn clip_window(raw: ArrayViewD<'_, f32>, modality: Modality) -> Result<(f64, f64), CurationError> {
    if raw.is_empty() {
        return Err(CurationError::EmptyImage);
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(CurationError::NonFinite);
    }
    Ok(match modality {
        Modality::CT => CT_WINDOW,
        Modality::MRI => {
            let mut sorted: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            sorted.sort_by(f64::total_cmp);
            (percentile_sorted(&sorted, MRI_PERCENTILES.0), percentile_sorted(&sorted, MRI_PERCENTILES.1))
        }
        _ => raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64))),
    })
}

/// Window and scale intensities to 8 bits.
///
/// CT is clipped to [`CT_WINDOW`], MRI to its 0.5th..99.5th percentiles and
/// everything else to its own min..max. The window maps linearly onto
/// `[0, 255]` with rounding half away from zero. An empty window (constant
/// MRI or non-CT input) yields zeros.
pub fn normalize_intensities(raw: ArrayViewD<'_, f32>, modality: Modality) -> Result<ArrayD<u8>, CurationError> {
    let (lo, hi) = clip_window(raw.view(), modality)?;
    if hi <= lo {
        return Ok(ArrayD::zeros(raw.raw_dim()));
    }
    let scale = 255.0 / (hi - lo);
    Ok(raw.mapv(|v| (((v as f64).clamp(lo, hi) - lo) * scale).round() as u8))
}

/// Replicate a grey image into three channels; `H x W x 3` passes through.
pub fn to_three_channel(gray: ArrayViewD<'_, u8>) -> Result<Array3<u8>, CurationError> {
    match gray.shape() {
        &[h, w] => {
            let g = gray.into_dimensionality::<Ix2>().expect("rank checked");
            Ok(Array3::from_shape_fn((h, w, 3), |(y, x, _)| g[[y, x]]))
        }
        &[_, _, 3] => Ok(gray.into_dimensionality().expect("rank checked").to_owned()),
        s => Err(CurationError::Rank(s.len())),
    }
}

/// One box per label value present in the slice, spanning the label's
/// minimum and maximum pixel column/row. Sorted by label value.
pub fn mask_to_boxes(
    labels: ArrayView2<'_, u32>,
    label_names: &BTreeMap<u32, String>,
) -> Result<Vec<GroundTruthBox>, CurationError> {
    let mut extrema: BTreeMap<u32, [usize; 4]> = BTreeMap::new();
    for ((row, col), &v) in labels.indexed_iter() {
        if v == 0 {
            continue;
        }
        extrema
            .entry(v)
            .and_modify(|e| {
                e[0] = e[0].min(col);
                e[1] = e[1].min(row);
                e[2] = e[2].max(col);
                e[3] = e[3].max(row);
            })
            .or_insert([col, row, col, row]);
    }
    extrema
        .into_iter()
        .map(|(v, [x0, y0, x1, y1])| {
            let name = label_names.get(&v).ok_or(CurationError::UnknownLabel(v))?;
            let bbox = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).expect("ordered extrema");
            Ok(GroundTruthBox::new(bbox, name.clone()))
        })
        .collect()
}

/// Cut a volume into normalised 3-channel slices with boxes.
///
/// The window is computed over the whole volume, then the first axis is
/// the slice axis. 2-D inputs (grey or `H x W x 3`) give one sample.
pub fn slice_volume(vol: &VolumeRecord) -> Result<Vec<SliceSample>, CurationError> {
    let img_shape = vol.image.shape();
    let lab_shape = vol.labels.shape();
    let colour = img_shape.len() == 3 && lab_shape.len() == 2 && img_shape[2] == 3;
    let spatial_ok = if colour { img_shape[..2] == *lab_shape } else { img_shape == lab_shape };
    if !spatial_ok {
        return Err(CurationError::ShapeMismatch { image: img_shape.to_vec(), labels: lab_shape.to_vec() });
    }
    let normalized = normalize_intensities(vol.image.view(), vol.modality)?;
    let make = |sample_id: String, image: ArrayViewD<'_, u8>, labels: ArrayView2<'_, u32>| -> Result<SliceSample, CurationError> {
        Ok(SliceSample {
            sample_id,
            dataset_id: vol.dataset_id.clone(),
            modality: vol.modality,
            image: to_three_channel(image)?,
            annotations: mask_to_boxes(labels, &vol.label_names)?,
            source_volume_id: vol.volume_id.clone(),
        })
    };
    match (lab_shape.len(), colour) {
        (2, _) => Ok(vec![make(vol.volume_id.clone(), normalized.view(), vol.labels.view().into_dimensionality::<Ix2>().expect("rank checked"))?]),
        (3, false) => (0..lab_shape[0])
            .map(|z| {
                make(
                    format!("{}_s{z:04}", vol.volume_id),
                    normalized.index_axis(Axis(0), z),
                    vol.labels.index_axis(Axis(0), z).into_dimensionality::<Ix2>().expect("rank checked"),
                )
            })
            .collect(),
        (r, _) => Err(CurationError::Rank(r)),
    }
}

/// Volume id together with the classes it contains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeClasses {
    pub volume_id: String,
    pub classes: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_volume_ids: BTreeSet<String>,
    pub val_volume_ids: BTreeSet<String>,
    pub holdout_classes: BTreeSet<String>,
    /// Subset of `val_volume_ids` forced out of training by a held-out class.
    #[serde(default)]
    pub holdout_volume_ids: BTreeSet<String>,
}

impl SplitManifest {
    pub fn split_of(&self, volume_id: &str) -> Option<Split> {
        if self.train_volume_ids.contains(volume_id) {
            Some(Split::Train)
        } else if self.val_volume_ids.contains(volume_id) {
            Some(Split::Val)
        } else {
            None
        }
    }

    /// Drop samples whose volume is unknown to the manifest and divide the
    /// rest into (train, val).
    pub fn partition(&self, samples: Vec<SliceSample>) -> (Vec<SliceSample>, Vec<SliceSample>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for s in samples {
            match self.split_of(&s.source_volume_id) {
                Some(Split::Train) => train.push(s),
                Some(Split::Val) => val.push(s),
                None => {}
            }
        }
        (train, val)
    }
}

/// Seeded, leakage-free train/validation split over whole volumes.
///
/// Volumes holding any held-out class go to validation. The rest are
/// shuffled and `floor(val_fraction * n)` of them become validation.
pub fn volume_level_split(
    volumes: &[VolumeClasses],
    val_fraction: f64,
    holdout_classes: &BTreeSet<String>,
    seed: u64,
) -> Result<SplitManifest, CurationError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CurationError::Fraction(val_fraction));
    }
    let mut seen = BTreeSet::new();
    for v in volumes {
        if !seen.insert(v.volume_id.as_str()) {
            return Err(CurationError::DuplicateVolume(v.volume_id.clone()));
        }
    }
    let (held, mut eligible): (Vec<&VolumeClasses>, Vec<&VolumeClasses>) =
        volumes.iter().partition(|v| !v.classes.is_disjoint(holdout_classes));
    if eligible.is_empty() {
        return Err(CurationError::EmptyTraining);
    }
    // sort first so the outcome does not depend on input order
    eligible.sort_by(|a, b| a.volume_id.cmp(&b.volume_id));
    eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (val_fraction * eligible.len() as f64 + 1e-9).floor() as usize;
    let n_val = n_val.min(eligible.len() - 1);
    let holdout_volume_ids: BTreeSet<String> = held.iter().map(|v| v.volume_id.clone()).collect();
    let mut val_volume_ids = holdout_volume_ids.clone();
    val_volume_ids.extend(eligible[..n_val].iter().map(|v| v.volume_id.clone()));
    Ok(SplitManifest {
        train_volume_ids: eligible[n_val..].iter().map(|v| v.volume_id.clone()).collect(),
        val_volume_ids,
        holdout_classes: holdout_classes.clone(),
        holdout_volume_ids,
    })
}
