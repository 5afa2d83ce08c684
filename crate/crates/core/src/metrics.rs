//! COCO-style average precision with 101-point interpolation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox, Detection, GroundTruthBox};

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no class has ground truth or detections")]
    NoEvaluableClasses,
    #[error("no IoU thresholds given")]
    NoThresholds,
    #[error("detection class index {index} outside the {classes}-class universe")]
    ClassIndex { index: usize, classes: usize },
    #[error("ground truth class {0:?} is not in the class universe")]
    UnknownClass(String),
}

/// Detections and ground truth for one image. Detection class indices refer
/// to the class universe passed to [`map_at`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthBox>,
}

/// One class over many images: `(scored boxes, gt boxes)` per image.
pub type ClassImages = Vec<(Vec<(BBox, f64)>, Vec<BBox>)>;

/// AP of one class; `None` when the class has neither ground truth nor
/// detections.
pub fn average_precision_for_class(images: &ClassImages, iou_threshold: f64) -> Option<f64> {
    let n_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    let mut ranked: Vec<(usize, BBox, f64)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, (d, _))| d.iter().map(move |(b, c)| (i, *b, *c)))
        .collect();
    if n_gt == 0 {
        return (!ranked.is_empty()).then_some(0.0);
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2));

    let mut matched: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (k, (img, bbox, _)) in ranked.iter().enumerate() {
        let gts = &images[*img].1;
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[*img][j] {
                continue;
            }
            let o = iou(bbox, g);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            matched[*img][j] = true;
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }

    // precision envelope, right to left
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while idx < curve.len() && curve[idx].0 < level - 1e-12 {
            idx += 1;
        }
        if idx < curve.len() {
            sum += curve[idx].1;
        }
    }
    Some(sum / 101.0)
}

/// AP of a single image whose detections and ground truth are all one class.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruthBox], iou_threshold: f64) -> Option<f64> {
    let images = vec![(
        dets.iter().map(|d| (d.bbox, d.confidence)).collect(),
        gts.iter().map(|g| g.bbox).collect(),
    )];
    average_precision_for_class(&images, iou_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapTable {
    pub thresholds: Vec<f64>,
    /// Mean AP over evaluable classes, one value per threshold.
    pub per_threshold: Vec<f64>,
    /// AP per evaluable class, one value per threshold.
    pub per_class: BTreeMap<String, Vec<f64>>,
}

impl MapTable {
    /// Mean over all thresholds in the table.
    pub fn mean(&self) -> f64 {
        self.per_threshold.iter().sum::<f64>() / self.per_threshold.len() as f64
    }

    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().position(|t| (t - threshold).abs() < 1e-9).map(|i| self.per_threshold[i])
    }
}

fn split_by_class(results: &[ImageResult], classes: &[String]) -> Result<Vec<ClassImages>, MetricsError> {
    let mut per_class: Vec<ClassImages> = vec![Vec::with_capacity(results.len()); classes.len()];
    for r in results {
        let mut dets = vec![Vec::new(); classes.len()];
        let mut gts = vec![Vec::new(); classes.len()];
        for d in &r.detections {
            let slot = dets.get_mut(d.class_index).ok_or(MetricsError::ClassIndex { index: d.class_index, classes: classes.len() })?;
            slot.push((d.bbox, d.confidence));
        }
        for g in &r.ground_truth {
            let c = classes.iter().position(|c| *c == g.class_name).ok_or_else(|| MetricsError::UnknownClass(g.class_name.clone()))?;
            gts[c].push(g.bbox);
        }
        for (c, (d, g)) in dets.into_iter().zip(gts).enumerate() {
            per_class[c].push((d, g));
        }
    }
    Ok(per_class)
}

/// Mean AP over `classes` at each threshold. Classes with no ground truth
/// and no detections are left out of every mean.
pub fn map_at(results: &[ImageResult], classes: &[String], thresholds: &[f64]) -> Result<MapTable, MetricsError> {
    if thresholds.is_empty() {
        return Err(MetricsError::NoThresholds);
    }
    let per_class_images = split_by_class(results, classes)?;
    let mut per_class = BTreeMap::new();
    for (name, images) in classes.iter().zip(&per_class_images) {
        let aps: Option<Vec<f64>> = thresholds.iter().map(|&t| average_precision_for_class(images, t)).collect();
        if let Some(aps) = aps {
            per_class.insert(name.clone(), aps);
        }
    }
    if per_class.is_empty() {
        return Err(MetricsError::NoEvaluableClasses);
    }
    let per_threshold = (0..thresholds.len())
        .map(|t| per_class.values().map(|v| v[t]).sum::<f64>() / per_class.len() as f64)
        .collect();
    Ok(MapTable { thresholds: thresholds.to_vec(), per_threshold, per_class })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map50: f64,
    pub map50_95: f64,
}

pub fn map50_and_50_95(results: &[ImageResult], classes: &[String]) -> Result<MapSummary, MetricsError> {
    let table = map_at(results, classes, &coco_thresholds())?;
    Ok(MapSummary { map50: table.per_threshold[0], map50_95: table.mean() })
}
