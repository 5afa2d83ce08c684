//! Dataset descriptors, array loaders and the detection-record format.
//!
//! A descriptor is a JSON file:
//!
//! ```json
//! {
//!   "dataset_id": "btcv",
//!   "volumes": [
//!     {"volume_id": "img0001", "image": "img0001.npy", "labels": "lab0001.npy",
//!      "modality": "CT", "label_names": {"1": "spleen", "6": "liver"}}
//!   ]
//! }
//! ```
//!
//! Paths are relative to the descriptor. Curated splits are written as
//! JSON Lines, one [`DetectionRecord`] per line, next to 8-bit RGB PNGs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{slice_volume, volume_level_split, CurationError, Modality, SliceSample, SplitManifest, VolumeRecord};
use crate::geometry::{BBox, GroundTruthBox};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}:{line}: {reason}")]
    Record { path: PathBuf, line: usize, reason: String },
    #[error("no loader for {0}")]
    NoLoader(PathBuf),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, reason: impl ToString) -> IoError {
    IoError::Format { path: path.to_path_buf(), reason: reason.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub volume_id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
    pub modality: Modality,
    pub label_names: BTreeMap<u32, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub volumes: Vec<VolumeEntry>,
}

impl DatasetDescriptor {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let raw = fs::read_to_string(path).map_err(file_err(path))?;
        serde_json::from_str(&raw).map_err(|e| format_err(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| format_err(path, e))?;
        fs::write(path, json).map_err(file_err(path))
    }
}

/// Reads intensity and label arrays from one file format.
pub trait ArrayLoader {
    fn handles(&self, path: &Path) -> bool;
    fn load_image(&self, path: &Path) -> Result<ArrayD<f32>, IoError>;
    fn load_labels(&self, path: &Path) -> Result<ArrayD<u32>, IoError>;
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

macro_rules! try_npy {
    ($path:expr, $out:ty, [$($t:ty),*]) => {{
        let bytes = fs::read($path).map_err(file_err($path))?;
        $(
            if let Ok(a) = ArrayD::<$t>::read_npy(bytes.as_slice()) {
                return Ok(a.mapv(|v| v as $out));
            }
        )*
        Err(format_err($path, "unsupported .npy dtype or layout"))
    }};
}

/// Any numeric `.npy` array, widened to `f64`.
pub fn read_npy_f64(path: &Path) -> Result<ArrayD<f64>, IoError> {
    try_npy!(path, f64, [f64, f32, i16, i32, i64, u8, u16, u32])
}

/// `.npy` files of any common numeric dtype.
#[derive(Debug, Default, Clone, Copy)]
pub struct NpyLoader;

impl ArrayLoader for NpyLoader {
    fn handles(&self, path: &Path) -> bool {
        has_extension(path, "npy")
    }

    fn load_image(&self, path: &Path) -> Result<ArrayD<f32>, IoError> {
        try_npy!(path, f32, [f32, f64, i16, i32, i64, u8, u16, u32])
    }

    fn load_labels(&self, path: &Path) -> Result<ArrayD<u32>, IoError> {
        try_npy!(path, u32, [u8, u16, u32, i32, i64, u64, i16])
    }
}

/// 2-D PNG images (grey or RGB) and single-channel PNG label maps.
#[derive(Debug, Default, Clone, Copy)]
pub struct PngLoader;

impl ArrayLoader for PngLoader {
    fn handles(&self, path: &Path) -> bool {
        has_extension(path, "png")
    }

    fn load_image(&self, path: &Path) -> Result<ArrayD<f32>, IoError> {
        let img = image::open(path).map_err(|e| format_err(path, e))?;
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| rgb.get_pixel(x as u32, y as u32)[c] as f32).into_dyn())
        } else {
            let g = img.to_luma16();
            let (w, h) = g.dimensions();
            Ok(ArrayD::from_shape_fn(ndarray::IxDyn(&[h as usize, w as usize]), |i| g.get_pixel(i[1] as u32, i[0] as u32)[0] as f32))
        }
    }

    fn load_labels(&self, path: &Path) -> Result<ArrayD<u32>, IoError> {
        let g = image::open(path).map_err(|e| format_err(path, e))?.to_luma16();
        let (w, h) = g.dimensions();
        Ok(ArrayD::from_shape_fn(ndarray::IxDyn(&[h as usize, w as usize]), |i| g.get_pixel(i[1] as u32, i[0] as u32)[0] as u32))
    }
}

/// Loader lookup by file; new formats plug in through [`ArrayLoader`].
pub struct LoaderRegistry {
    loaders: Vec<Box<dyn ArrayLoader>>,
}

impl Default for LoaderRegistry {
    fn default() -> Self {
        Self { loaders: vec![Box::new(NpyLoader), Box::new(PngLoader)] }
    }
}

impl LoaderRegistry {
    pub fn register(&mut self, loader: Box<dyn ArrayLoader>) {
        self.loaders.insert(0, loader);
    }

    fn find(&self, path: &Path) -> Result<&dyn ArrayLoader, IoError> {
        self.loaders.iter().find(|l| l.handles(path)).map(|l| l.as_ref()).ok_or_else(|| IoError::NoLoader(path.to_path_buf()))
    }

    pub fn load_labels(&self, path: &Path) -> Result<ArrayD<u32>, IoError> {
        self.find(path)?.load_labels(path)
    }

    pub fn load_volume(&self, entry: &VolumeEntry, dataset_id: &str, base: &Path) -> Result<VolumeRecord, IoError> {
        let image_path = base.join(&entry.image);
        let label_path = base.join(&entry.labels);
        Ok(VolumeRecord {
            volume_id: entry.volume_id.clone(),
            dataset_id: dataset_id.to_string(),
            modality: entry.modality,
            image: self.find(&image_path)?.load_image(&image_path)?,
            labels: self.load_labels(&label_path)?,
            label_names: entry.label_names.clone(),
        })
    }
}

/// One line of a curated split file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sample_id: String,
    pub dataset_id: String,
    pub modality: Modality,
    /// Image path relative to the record file.
    pub image: String,
    /// `[x_min, y_min, x_max, y_max]` in pixels.
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<String>,
    pub source_volume_id: String,
}

impl DetectionRecord {
    pub fn from_sample(sample: &SliceSample, image: impl Into<String>) -> Self {
        Self {
            sample_id: sample.sample_id.clone(),
            dataset_id: sample.dataset_id.clone(),
            modality: sample.modality,
            image: image.into(),
            boxes: sample.annotations.iter().map(|a| a.bbox.as_array()).collect(),
            classes: sample.annotations.iter().map(|a| a.class_name.clone()).collect(),
            source_volume_id: sample.source_volume_id.clone(),
        }
    }

    pub fn annotations(&self) -> Result<Vec<GroundTruthBox>, String> {
        if self.boxes.len() != self.classes.len() {
            return Err(format!("{} boxes but {} class names", self.boxes.len(), self.classes.len()));
        }
        self.boxes
            .iter()
            .zip(&self.classes)
            .map(|(b, c)| {
                if c.is_empty() {
                    return Err("empty class name".to_string());
                }
                BBox::new(b[0], b[1], b[2], b[3]).map(|bbox| GroundTruthBox::new(bbox, c.clone())).map_err(|e| e.to_string())
            })
            .collect()
    }
}

pub fn write_records(path: &Path, records: &[DetectionRecord]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path).map_err(file_err(path))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| format_err(path, e))?;
        writeln!(w, "{line}").map_err(file_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<DetectionRecord>, IoError> {
    let reader = BufReader::new(File::open(path).map_err(file_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| IoError::Record { path: path.to_path_buf(), line: i + 1, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_png(path: &Path, image: &Array3<u8>) -> Result<(), IoError> {
    let (h, w, _) = image.dim();
    let raw: Vec<u8> = image.iter().copied().collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| format_err(path, "image is not H x W x 3"))?;
    buf.save(path).map_err(|e| format_err(path, e))
}

pub fn read_png(path: &Path) -> Result<Array3<u8>, IoError> {
    let rgb = image::open(path).map_err(|e| format_err(path, e))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw()).map_err(|e| format_err(path, e))
}

/// Rebuild a sample from its record; `base` is the record file's directory.
pub fn load_sample(record: &DetectionRecord, base: &Path) -> Result<SliceSample, IoError> {
    let path = base.join(&record.image);
    Ok(SliceSample {
        sample_id: record.sample_id.clone(),
        dataset_id: record.dataset_id.clone(),
        modality: record.modality,
        image: read_png(&path)?,
        annotations: record.annotations().map_err(|reason| format_err(&path, reason))?,
        source_volume_id: record.source_volume_id.clone(),
    })
}

/// Load every sample listed in a record file.
pub fn load_split(records_path: &Path) -> Result<Vec<SliceSample>, IoError> {
    let base = records_path.parent().unwrap_or(Path::new("."));
    read_records(records_path)?.iter().map(|r| load_sample(r, base)).collect()
}

/// Write an array as `.npy`.
pub fn write_npy<T: ndarray_npy::WritableElement>(path: &Path, array: &ArrayD<T>) -> Result<(), IoError> {
    let f = File::create(path).map_err(file_err(path))?;
    array.write_npy(BufWriter::new(f)).map_err(|e| format_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationOptions {
    pub val_fraction: f64,
    pub holdout_classes: BTreeSet<String>,
    pub seed: u64,
}

impl Default for CurationOptions {
    fn default() -> Self {
        Self { val_fraction: 0.05, holdout_classes: BTreeSet::new(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub train_samples: usize,
    pub val_samples: usize,
    pub manifest: SplitManifest,
}

/// Descriptors in, `train.jsonl`, `val.jsonl`, `manifest.json` and
/// `images/*.png` out.
pub fn curate(
    descriptors: &[PathBuf],
    out_dir: &Path,
    options: &CurationOptions,
    loaders: &LoaderRegistry,
) -> Result<CurationSummary, CurationError> {
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(file_err(&images_dir))?;
    let loaded: Vec<(DatasetDescriptor, PathBuf)> = descriptors
        .iter()
        .map(|p| Ok((DatasetDescriptor::load(p)?, p.parent().unwrap_or(Path::new(".")).to_path_buf())))
        .collect::<Result<_, IoError>>()?;

    // first pass: class content per volume, labels only
    let mut summaries = Vec::new();
    for (desc, base) in &loaded {
        for entry in &desc.volumes {
            let labels = loaders.load_labels(&base.join(&entry.labels))?;
            let values: BTreeSet<u32> = labels.iter().copied().filter(|&v| v != 0).collect();
            let classes = values
                .into_iter()
                .map(|v| entry.label_names.get(&v).cloned().ok_or(CurationError::UnknownLabel(v)))
                .collect::<Result<_, _>>()?;
            summaries.push(super::VolumeClasses { volume_id: entry.volume_id.clone(), classes });
        }
    }
    let manifest = volume_level_split(&summaries, options.val_fraction, &options.holdout_classes, options.seed)?;

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (desc, base) in &loaded {
        for entry in &desc.volumes {
            let vol = loaders.load_volume(entry, &desc.dataset_id, base)?;
            for sample in slice_volume(&vol)? {
                let rel = format!("images/{}.png", sample.sample_id);
                write_png(&out_dir.join(&rel), &sample.image)?;
                let rec = DetectionRecord::from_sample(&sample, rel);
                match manifest.split_of(&vol.volume_id) {
                    Some(super::Split::Train) => train.push(rec),
                    _ => val.push(rec),
                }
            }
        }
    }
    write_records(&out_dir.join("train.jsonl"), &train)?;
    write_records(&out_dir.join("val.jsonl"), &val)?;
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| format_err(&manifest_path, e))?;
    fs::write(&manifest_path, json).map_err(file_err(&manifest_path))?;
    Ok(CurationSummary { train_samples: train.len(), val_samples: val.len(), manifest })
}
