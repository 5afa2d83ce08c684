//! Axis-aligned boxes, IoU, per-class NMS and the elbow threshold used for
//! visualisation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EmbeddingVector;

/// Default IoU threshold for per-class NMS.
pub const DEFAULT_NMS_IOU: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box coordinates must be finite, got ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("box corners out of order: ({0}, {1}) > ({2}, {3})")]
    Inverted(f64, f64, f64, f64),
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("elbow threshold needs at least one score")]
    NoScores,
}

/// Pixel-space box, origin at the top-left corner of the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite(x_min, y_min, x_max, y_max));
        }
        if x_min > x_max || y_min > y_max {
            return Err(GeometryError::Inverted(x_min, y_min, x_max, y_max));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// Box from a centre and size; negative sizes are clamped to zero.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let (hw, hh) = (w.max(0.0) / 2.0, h.max(0.0) / 2.0);
        Self { x_min: cx - hw, y_min: cy - hh, x_max: cx + hw, y_max: cy + hh }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Clamp into `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    fn intersection_area(&self, other: &Self) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }
}

/// Intersection over union; `0` when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A scored region proposed by the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Index into the vocabulary the detector was run with.
    pub class_index: usize,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
}

impl Detection {
    pub fn new(bbox: BBox, class_index: usize, confidence: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(GeometryError::Confidence(confidence));
        }
        Ok(Self { bbox, class_index, confidence, embedding: None })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub class_name: String,
    #[serde(default)]
    pub is_pseudo: bool,
}

impl GroundTruthBox {
    pub fn new(bbox: BBox, class_name: impl Into<String>) -> Self {
        Self { bbox, class_name: class_name.into(), is_pseudo: false }
    }

    pub fn pseudo(bbox: BBox, class_name: impl Into<String>) -> Self {
        Self { bbox, class_name: class_name.into(), is_pseudo: true }
    }
}

/// Sort detections by confidence, highest first. Ties keep input order.
pub fn sort_by_confidence(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
}

/// Greedy per-class non-maximum suppression.
///
/// A detection is dropped when its IoU with an already kept detection of the
/// same class exceeds `iou_threshold`. Output is sorted by confidence.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_index == dets[i].class_index
                && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Image-specific visualisation threshold at the sharpest drop of a
/// descending score curve.
///
/// Returns the midpoint of the largest gap between consecutive scores; the
/// earliest gap wins ties. A single score yields half its value so that it
/// is kept. Detections with `confidence >= threshold` are shown.
pub fn elbow_threshold(confidences: &[f64]) -> Result<f64, GeometryError> {
    let mut sorted = confidences.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    match sorted.as_slice() {
        [] => Err(GeometryError::NoScores),
        [only] => Ok(only / 2.0),
        _ => {
            let mut best = 0;
            let mut best_gap = f64::NEG_INFINITY;
            for (i, pair) in sorted.windows(2).enumerate() {
                let gap = pair[0] - pair[1];
                if gap > best_gap {
                    best_gap = gap;
                    best = i;
                }
            }
            Ok((sorted[best] + sorted[best + 1]) / 2.0)
        }
    }
}
