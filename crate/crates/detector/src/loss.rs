//! Training losses. All functions work in the dtype of their inputs, so the
//! gradient checks can run them in f64.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor, D};
use ovd_core::geometry::BBox;
use serde::{Deserialize, Serialize};

use crate::assign::assign;
use crate::config::{IouKind, LossConfig};
use crate::model::{Detector, HeadOutput};
use crate::ops::atan;
use crate::DetectorError;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Region-text cross-entropy plus the weighted objectness term.
    pub contrastive: f64,
    pub region_text: f64,
    pub objectness: f64,
    pub iou_loss: f64,
    pub dfl: f64,
    /// 1 when the batch carries box supervision, else 0.
    pub lambda_indicator: f64,
    pub total: f64,
    pub assigned_regions: usize,
    /// DFL targets that fell outside the bin range and were clamped.
    pub dfl_clamped: usize,
}

fn zero(device: &Device, dtype: DType) -> candle_core::Result<Tensor> {
    Tensor::zeros((), dtype, device)
}

fn host_tensor(values: Vec<f64>, shape: impl Into<candle_core::Shape>, like: &Tensor) -> candle_core::Result<Tensor> {
    Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())
}

/// Mean cross-entropy of each row of `sims` (`M x V` logits) against its
/// target entry. Returns `None` when `M == 0`.
pub fn contrastive_loss(sims: &Tensor, targets: &[u32]) -> candle_core::Result<Option<Tensor>> {
    if targets.is_empty() {
        return Ok(None);
    }
    let t = Tensor::new(targets, sims.device())?;
    Ok(Some(candle_nn::loss::cross_entropy(sims, &t)?))
}

/// Binary cross-entropy with logits, summed and divided by `normaliser`.
/// Positive cells are weighted by `positive_weight`.
pub fn objectness_loss(logits: &Tensor, targets: &[f64], positive_weight: f64, normaliser: f64) -> candle_core::Result<Tensor> {
    let z = host_tensor(targets.to_vec(), logits.shape(), logits)?;
    let w = host_tensor(targets.iter().map(|&t| 1.0 + (positive_weight - 1.0) * t).collect(), logits.shape(), logits)?;
    // max(x, 0) - x z + log(1 + exp(-|x|))
    let bce = ((logits.relu()? - (logits * &z)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    (bce * w)?.sum_all()? / normaliser.max(1.0)
}

/// Weighted mean of `1 - IoU` (or `1 - CIoU`) over `M x 4` corner boxes.
pub fn iou_loss(pred: &Tensor, target: &Tensor, weights: &[f64], kind: IouKind) -> candle_core::Result<Tensor> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total <= 0.0 {
        return zero(pred.device(), pred.dtype());
    }
    let col = |t: &Tensor, i: usize| t.narrow(1, i, 1).and_then(|c| c.squeeze(1));
    let (px1, py1, px2, py2) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (tx1, ty1, tx2, ty2) = (col(target, 0)?, col(target, 1)?, col(target, 2)?, col(target, 3)?);
    let (pw, ph) = ((&px2 - &px1)?, (&py2 - &py1)?);
    let (tw, th) = ((&tx2 - &tx1)?, (&ty2 - &ty1)?);
    let iw = (px2.minimum(&tx2)? - px1.maximum(&tx1)?)?.relu()?;
    let ih = (py2.minimum(&ty2)? - py1.maximum(&ty1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((((&pw * &ph)? + (&tw * &th)?)? - &inter)? + EPS)?;
    let iou = (&inter / union)?;
    let per_box = match kind {
        IouKind::Iou => iou.affine(-1.0, 1.0)?,
        IouKind::Ciou => {
            let cw = (px2.maximum(&tx2)? - px1.minimum(&tx1)?)?;
            let ch = (py2.maximum(&ty2)? - py1.minimum(&ty1)?)?;
            let c2 = ((cw.sqr()? + ch.sqr()?)? + EPS)?;
            let dx = ((&px1 + &px2)? - (&tx1 + &tx2)?)?.affine(0.5, 0.0)?;
            let dy = ((&py1 + &py2)? - (&ty1 + &ty2)?)?.affine(0.5, 0.0)?;
            let rho2 = (dx.sqr()? + dy.sqr()?)?;
            let v = (atan(&(&tw / (&th + EPS)?)?)? - atan(&(&pw / (&ph + EPS)?)?)?)?.sqr()?.affine(4.0 / (PI * PI), 0.0)?;
            let a = (&v / ((iou.affine(-1.0, 1.0)? + &v)? + EPS)?)?;
            let ciou = ((&iou - (rho2 / c2)?)? - (a * v)?)?;
            ciou.affine(-1.0, 1.0)?
        }
    };
    let w = host_tensor(weights.to_vec(), weights.len(), pred)?;
    (per_box * w)?.sum_all()? / total
}

/// Distribution focal loss. `logits`: `M x 4 x B`; `targets` are per-side
/// distances in bin units. Returns the loss and the number of clamped targets.
pub fn dfl_loss(logits: &Tensor, targets: &[[f64; 4]], weights: &[f64]) -> candle_core::Result<(Tensor, usize)> {
    let total: f64 = weights.iter().sum();
    if targets.is_empty() || total <= 0.0 {
        return Ok((zero(logits.device(), logits.dtype())?, 0));
    }
    let b = logits.dim(D::Minus1)?;
    let hi = (b - 1) as f64;
    let m = targets.len();
    let mut clamped = 0;
    let (mut left, mut right) = (Vec::with_capacity(4 * m), Vec::with_capacity(4 * m));
    let (mut wl, mut wr) = (Vec::with_capacity(4 * m), Vec::with_capacity(4 * m));
    for (t, &w) in targets.iter().zip(weights) {
        for &side in t {
            if !(0.0..=hi).contains(&side) {
                clamped += 1;
            }
            let s = side.clamp(0.0, hi);
            let l = (s.floor() as usize).min(b - 2);
            left.push(l as u32);
            right.push(l as u32 + 1);
            wl.push((l as f64 + 1.0 - s) * w / 4.0);
            wr.push((s - l as f64) * w / 4.0);
        }
    }
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = |v: Vec<u32>| Tensor::from_vec(v, (m, 4, 1), logits.device());
    let lp_l = logp.gather(&idx(left)?, 2)?.squeeze(2)?;
    let lp_r = logp.gather(&idx(right)?, 2)?.squeeze(2)?;
    let loss = ((lp_l * host_tensor(wl, (m, 4), logits)?)? + (lp_r * host_tensor(wr, (m, 4), logits)?)?)?;
    Ok(((loss.sum_all()?.neg()? / total)?, clamped))
}

/// `contrastive + lambda (iou + dfl)`, each term scaled by its weight.
pub fn total_loss(contrastive: &Tensor, iou: &Tensor, dfl: &Tensor, lambda: f64, cfg: &LossConfig) -> candle_core::Result<Tensor> {
    let boxes = (iou.affine(cfg.iou_weight, 0.0)? + dfl.affine(cfg.dfl_weight, 0.0)?)?;
    contrastive.affine(cfg.contrastive_weight, 0.0)? + boxes.affine(lambda, 0.0)?
}

/// Boxes of one image in input pixels, the vocabulary entry each one is a
/// positive for, and whether its boxes supervise regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    pub boxes: Vec<BBox>,
    pub entries: Vec<usize>,
    pub box_supervision: bool,
}

fn scalar(t: &Tensor) -> candle_core::Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}

/// Full loss of a batch given the head outputs and the `N x K x V`
/// similarities for the vocabularies the targets refer to.
pub fn detection_loss(
    model: &Detector,
    out: &HeadOutput,
    sims: &Tensor,
    targets: &[ImageTargets],
    cfg: &LossConfig,
) -> Result<(Tensor, LossBreakdown), DetectorError> {
    let anchors = model.anchors();
    let k = anchors.len();
    let n = out.batch();
    if targets.len() != n {
        return Err(DetectorError::Input(format!("{} target sets for a batch of {n}", targets.len())));
    }
    let stride = model.config().stride() as f64;
    let mut obj = vec![0.0; n * k];
    let mut pos: Vec<u32> = Vec::new();
    let mut entries: Vec<u32> = Vec::new();
    let mut boxes: Vec<f64> = Vec::new();
    let mut dfl_targets: Vec<[f64; 4]> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        for (cell, g) in assign(anchors, stride, &t.boxes, cfg.center_radius).into_iter().enumerate() {
            let Some(g) = g else { continue };
            let b = &t.boxes[g];
            let [cx, cy] = anchors[cell];
            obj[i * k + cell] = 1.0;
            pos.push((i * k + cell) as u32);
            entries.push(t.entries[g] as u32);
            boxes.extend(b.as_array());
            dfl_targets.push([(cx - b.x_min) / stride, (cy - b.y_min) / stride, (b.x_max - cx) / stride, (b.y_max - cy) / stride]);
            lambda.push(if t.box_supervision { 1.0 } else { 0.0 });
        }
    }
    let m = pos.len();
    let v = sims.dim(2)?;
    let obj_loss = objectness_loss(&out.obj_logits.flatten_all()?, &obj, cfg.positive_weight, m as f64)?;

    let zero_t = zero(sims.device(), sims.dtype())?;
    let (region_text, iou, (dfl, clamped)) = if m == 0 {
        (zero_t.clone(), zero_t.clone(), (zero_t.clone(), 0))
    } else {
        let idx = Tensor::from_vec(pos, m, sims.device())?;
        let rows = sims.reshape((n * k, v))?.index_select(&idx, 0)?;
        let ce = contrastive_loss(&rows, &entries)?.expect("non-empty");
        let b = model.config().dfl_bins;
        let logits = out.box_logits.reshape((n * k, 4, b))?.index_select(&idx, 0)?;
        let decoded = model.decode_boxes(out)?.reshape((n * k, 4))?.index_select(&idx, 0)?;
        let target_boxes = host_tensor(boxes, (m, 4), &decoded)?;
        let iou = iou_loss(&decoded, &target_boxes, &lambda, cfg.iou_kind)?;
        (ce, iou, dfl_loss(&logits, &dfl_targets, &lambda)?)
    };
    let contrastive = (region_text.clone() + obj_loss.affine(cfg.objectness_weight, 0.0)?)?;
    let lambda_indicator = if lambda.iter().any(|&l| l > 0.0) { 1.0 } else { 0.0 };
    let total = total_loss(&contrastive, &iou, &dfl, lambda_indicator, cfg)?;
    let breakdown = LossBreakdown {
        contrastive: scalar(&contrastive)?,
        region_text: scalar(&region_text)?,
        objectness: scalar(&obj_loss)?,
        iou_loss: scalar(&iou)?,
        dfl: scalar(&dfl)?,
        lambda_indicator,
        total: scalar(&total)?,
        assigned_regions: m,
        dfl_clamped: clamped,
    };
    Ok((total, breakdown))
}
