//! WebAssembly bindings behind `www/index.html`. Structured values cross
//! the boundary as JSON strings.

use ndarray::{ArrayD, IxDyn};
use ovd_core::curation::{clip_window, normalize_intensities, Modality};
use ovd_core::geometry::{elbow_threshold, iou, nms, BBox, Detection, GroundTruthBox};
use ovd_core::presence::{Presence, PresenceMatrix};
use ovd_core::pseudo_label::{decide, find_unmatched};
use ovd_core::vocabulary::Vocabulary;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Deserialize)]
struct BoxIn {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    #[serde(default)]
    class_index: usize,
    confidence: f64,
}

#[derive(Debug, Serialize)]
struct Suppression {
    /// Input indices that survive, highest confidence first.
    kept: Vec<usize>,
    /// Elbow threshold over the surviving scores.
    threshold: Option<f64>,
    /// Input indices at or above the threshold.
    shown: Vec<usize>,
}

/// Per-class NMS over a JSON array of scored boxes, followed by the elbow
/// display threshold.
#[wasm_bindgen]
pub fn suppress(boxes_json: &str, iou_threshold: f64) -> Result<String, String> {
    let input: Vec<BoxIn> = serde_json::from_str(boxes_json).map_err(|e| e.to_string())?;
    let dets = input
        .iter()
        .map(|b| {
            let bbox = BBox::new(b.x_min, b.y_min, b.x_max, b.y_max).map_err(|e| e.to_string())?;
            Detection::new(bbox, b.class_index, b.confidence).map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, String>>()?;
    let survivors = nms(&dets, iou_threshold);
    // map survivors back to input positions; identical duplicates resolve in order
    let mut used = vec![false; dets.len()];
    let kept: Vec<usize> = survivors
        .iter()
        .map(|s| {
            let i = (0..dets.len()).find(|&i| !used[i] && dets[i] == *s).expect("survivor comes from the input");
            used[i] = true;
            i
        })
        .collect();
    let scores: Vec<f64> = survivors.iter().map(|d| d.confidence).collect();
    let threshold = elbow_threshold(&scores).ok();
    let shown = kept.iter().copied().filter(|&i| threshold.is_some_and(|t| dets[i].confidence >= t)).collect();
    serde_json::to_string(&Suppression { kept, threshold, shown }).map_err(|e| e.to_string())
}

/// Intersection over union of two boxes given as `[x0, y0, x1, y1]`.
#[wasm_bindgen]
pub fn box_iou(a: &[f64], b: &[f64]) -> Result<f64, String> {
    let parse = |v: &[f64]| match v {
        [x0, y0, x1, y1] => BBox::new(*x0, *y0, *x1, *y1).map_err(|e| e.to_string()),
        _ => Err(format!("expected 4 coordinates, got {}", v.len())),
    };
    Ok(iou(&parse(a)?, &parse(b)?))
}

fn modality(name: &str) -> Result<Modality, String> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| format!("unknown modality {name:?}"))
}

/// Window and scale raw intensities to 8 bits.
#[wasm_bindgen]
pub fn normalize(raw: &[f32], modality_name: &str) -> Result<Vec<u8>, String> {
    let m = modality(modality_name)?;
    let arr = ArrayD::from_shape_vec(IxDyn(&[raw.len()]), raw.to_vec()).map_err(|e| e.to_string())?;
    let out = normalize_intensities(arr.view(), m).map_err(|e| e.to_string())?;
    Ok(out.into_raw_vec_and_offset().0)
}

/// The `[low, high]` clip window the modality would use on `raw`.
#[wasm_bindgen]
pub fn window(raw: &[f32], modality_name: &str) -> Result<Vec<f64>, String> {
    let m = modality(modality_name)?;
    let arr = ArrayD::from_shape_vec(IxDyn(&[raw.len()]), raw.to_vec()).map_err(|e| e.to_string())?;
    let (lo, hi) = clip_window(arr.view(), m).map_err(|e| e.to_string())?;
    Ok(vec![lo, hi])
}

#[derive(Debug, Serialize)]
struct Routing {
    max_iou: f64,
    unmatched: bool,
    action: Option<String>,
    reason: Option<String>,
}

/// How one prediction is routed: `matrix_value` is the dataset's presence
/// value for the predicted class, the prediction is compared against a
/// single ground-truth box.
#[wasm_bindgen]
pub fn route_prediction(matrix_value: i8, confidence: f64, pred: &[f64], gt: &[f64], iou_threshold: f64, confidence_threshold: f64) -> Result<String, String> {
    let presence = Presence::from_value(matrix_value).ok_or_else(|| format!("matrix value must be 1, 0 or -1, got {matrix_value}"))?;
    let bbox = |v: &[f64]| match v {
        [x0, y0, x1, y1] => BBox::new(*x0, *y0, *x1, *y1).map_err(|e| e.to_string()),
        _ => Err(format!("expected 4 coordinates, got {}", v.len())),
    };
    let class = "organ".to_string();
    let matrix = PresenceMatrix::new(vec!["demo".into()], vec![class.clone()], vec![presence]).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::from_classes(std::slice::from_ref(&class)).map_err(|e| e.to_string())?;
    let det = Detection::new(bbox(pred)?, 0, confidence).map_err(|e| e.to_string())?;
    let gt = GroundTruthBox::new(bbox(gt)?, "annotated");
    let max_iou = iou(&det.bbox, &gt.bbox);
    let unmatched = find_unmatched(std::slice::from_ref(&det), std::slice::from_ref(&gt), iou_threshold);
    let decision = match unmatched.first() {
        Some(d) => Some(decide(d, "demo", &matrix, &vocab, confidence_threshold).map_err(|e| e.to_string())?),
        None => None,
    };
    let name = |v: serde_json::Value| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
    let routing = Routing {
        max_iou,
        unmatched: decision.is_some(),
        action: decision.as_ref().map(|d| name(serde_json::to_value(d.action).expect("enum serialises"))),
        reason: decision.as_ref().map(|d| name(serde_json::to_value(d.reason).expect("enum serialises"))),
    };
    serde_json::to_string(&routing).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn suppress_drops_overlaps_and_thresholds() {
        let boxes = r#"[
            {"x_min":0,"y_min":0,"x_max":10,"y_max":10,"confidence":0.9},
            {"x_min":1,"y_min":1,"x_max":11,"y_max":11,"confidence":0.8},
            {"x_min":50,"y_min":50,"x_max":60,"y_max":60,"confidence":0.2},
            {"x_min":1,"y_min":1,"x_max":11,"y_max":11,"class_index":1,"confidence":0.85}
        ]"#;
        let out: Value = serde_json::from_str(&suppress(boxes, 0.5).unwrap()).unwrap();
        assert_eq!(out["kept"], serde_json::json!([0, 3, 2]));
        assert_eq!(out["shown"], serde_json::json!([0, 3]));
        assert!(suppress("not json", 0.5).is_err());
    }

    #[test]
    fn iou_of_half_overlap() {
        assert!((box_iou(&[0.0, 0.0, 10.0, 10.0], &[0.0, 0.0, 10.0, 5.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(box_iou(&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn ct_window() {
        assert_eq!(normalize(&[1500.0, 250.0, -900.0], "CT").unwrap(), vec![255, 128, 0]);
        assert_eq!(window(&[0.0], "CT").unwrap(), vec![-500.0, 1000.0]);
        assert!(normalize(&[1.0], "PET").is_err());
    }

    #[test]
    fn routing_follows_the_matrix() {
        let gt = [0.0, 0.0, 10.0, 10.0];
        let far = [40.0, 40.0, 50.0, 50.0];
        let route = |m, c, p: &[f64]| -> Value { serde_json::from_str(&route_prediction(m, c, p, &gt, 0.3, 0.9).unwrap()).unwrap() };
        assert_eq!(route(0, 0.95, &far)["action"], "INJECT_PSEUDO_LABEL");
        assert_eq!(route(0, 0.5, &far)["reason"], "low_confidence");
        assert_eq!(route(-1, 0.95, &far)["reason"], "class_impossible");
        assert_eq!(route(1, 0.95, &gt)["unmatched"], false);
        assert!(route_prediction(2, 0.5, &far, &gt, 0.3, 0.9).is_err());
    }
}
