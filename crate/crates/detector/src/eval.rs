//! Zero-shot evaluation over base and novel classes, FPS measurement.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::Tensor;
use ndarray::ArrayView2;
use ovd_core::curation::SliceSample;
use ovd_core::encoder::FoundationEncoder;
use ovd_core::geometry::{nms, Detection};
use ovd_core::metrics::{map_at, coco_thresholds, ImageResult, MetricsError};
use ovd_core::vocabulary::{PromptTemplate, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::data::prepare;
use crate::model::{batch_tensor, Detector};
use crate::DetectorError;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub base: Vec<String>,
    pub novel: Vec<String>,
}

impl ClassPartition {
    pub fn all(&self) -> Vec<String> {
        self.base.iter().chain(&self.novel).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Dataset id, or `"all"` for the pooled row.
    pub dataset: String,
    /// `"base"` or `"base+novel"`.
    pub split: String,
    pub map50: f64,
    pub map50_95: f64,
    pub images: usize,
    /// Classes that entered the mean.
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub fps: f64,
    pub images: usize,
    pub seconds: f64,
    pub hardware: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// mAP50 per class over all images, base+novel vocabulary.
    pub per_class_map50: BTreeMap<String, f64>,
    pub images: usize,
    pub fps: Option<FpsReport>,
}

impl EvalReport {
    pub fn row(&self, dataset: &str, split: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.dataset == dataset && r.split == split)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:<11} {:>7} {:>9} {:>7} {:>8}\n", "dataset", "split", "mAP50", "mAP50:95", "images", "classes");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<16} {:<11} {:>7.4} {:>9.4} {:>7} {:>8}\n",
                r.dataset, r.split, r.map50, r.map50_95, r.images, r.classes
            ));
        }
        if let Some(f) = &self.fps {
            s.push_str(&format!("fps {:.1} over {} images ({})\n", f.fps, f.images, f.hardware));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub prompt: PromptTemplate,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch_size: 16, nms_iou: ovd_core::geometry::DEFAULT_NMS_IOU, max_detections: 100, prompt: PromptTemplate::default() }
    }
}

/// The evaluation vocabulary: base classes first, then novel ones.
pub fn partition_vocabulary(partition: &ClassPartition, encoder: &dyn FoundationEncoder, prompt: &PromptTemplate) -> Result<Vocabulary, DetectorError> {
    let mut vocab = Vocabulary::from_classes(&partition.all())?;
    vocab.encode_labels(encoder, prompt)?;
    Ok(vocab)
}

/// Post-NMS detections for prepared samples, in input order.
pub fn predict(model: &Detector, samples: &[&SliceSample], vocab: &Vocabulary, options: &EvalOptions) -> Result<Vec<Vec<Detection>>, DetectorError> {
    let size = model.config().input_size;
    let embeddings = vocab.embeddings()?;
    let mut all = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(options.batch_size.max(1)) {
        let images = batch_tensor(&chunk.iter().map(|s| s.image.view()).collect::<Vec<_>>(), size, model.device())?;
        let out = model.features(&images)?;
        let w = model.vocabulary_tensor(&vec![embeddings.clone(); chunk.len()])?;
        let sims = model.similarities(&out, &w)?;
        for dets in model.detections(&out, &sims, 0.0, false)? {
            let mut kept = nms(&dets, options.nms_iou);
            kept.truncate(options.max_detections);
            all.push(kept);
        }
    }
    Ok(all)
}

fn restrict(results: &[ImageResult], classes: &[String], keep: usize) -> Vec<ImageResult> {
    results
        .iter()
        .map(|r| ImageResult {
            detections: r.detections.iter().filter(|d| d.class_index < keep).cloned().collect(),
            ground_truth: r.ground_truth.iter().filter(|g| classes[..keep].contains(&g.class_name)).cloned().collect(),
        })
        .collect()
}

fn row(results: &[ImageResult], classes: &[String], keep: usize, dataset: &str, split: &str) -> Result<Option<EvalRow>, DetectorError> {
    let subset = restrict(results, classes, keep);
    match map_at(&subset, &classes[..keep], &coco_thresholds()) {
        Ok(t) => Ok(Some(EvalRow {
            dataset: dataset.to_string(),
            split: split.to_string(),
            map50: t.per_threshold[0],
            map50_95: t.mean(),
            images: results.len(),
            classes: t.per_class.len(),
        })),
        Err(MetricsError::NoEvaluableClasses) => Ok(None),
        Err(e) => Err(DetectorError::Metrics(e)),
    }
}

/// Evaluate with every partition class in the vocabulary and no confidence
/// floor. Rows are produced per dataset and pooled, for base classes and
/// for base plus novel classes. Ground truth of classes outside the
/// partition is ignored.
pub fn evaluate(
    model: &Detector,
    samples: &[SliceSample],
    partition: &ClassPartition,
    encoder: &dyn FoundationEncoder,
    options: &EvalOptions,
) -> Result<EvalReport, DetectorError> {
    if samples.is_empty() {
        return Err(DetectorError::Input("evaluation set is empty".into()));
    }
    let size = model.config().input_size;
    let mut prepared: Vec<SliceSample> = samples.iter().map(|s| prepare(s, size)).collect();
    prepared.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let vocab = partition_vocabulary(partition, encoder, &options.prompt)?;
    let classes = partition.all();
    let refs: Vec<&SliceSample> = prepared.iter().collect();
    let dets = predict(model, &refs, &vocab, options)?;
    let results: Vec<(String, ImageResult)> = prepared
        .iter()
        .zip(dets)
        .map(|(s, d)| {
            let gt = s.annotations.iter().filter(|g| classes.contains(&g.class_name)).cloned().collect();
            (s.dataset_id.clone(), ImageResult { detections: d, ground_truth: gt })
        })
        .collect();

    let mut datasets: Vec<String> = results.iter().map(|(d, _)| d.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let mut groups: Vec<(String, Vec<ImageResult>)> = datasets
        .iter()
        .map(|d| (d.clone(), results.iter().filter(|(x, _)| x == d).map(|(_, r)| r.clone()).collect()))
        .collect();
    groups.push(("all".to_string(), results.iter().map(|(_, r)| r.clone()).collect()));

    let mut rows = Vec::new();
    for (name, group) in &groups {
        rows.extend(row(group, &classes, partition.base.len(), name, "base")?);
        rows.extend(row(group, &classes, classes.len(), name, "base+novel")?);
    }
    let pooled = &groups.last().expect("pooled group").1;
    let per_class_map50 = match map_at(pooled, &classes, &[0.5]) {
        Ok(t) => t.per_class.into_iter().map(|(c, v)| (c, v[0])).collect(),
        Err(MetricsError::NoEvaluableClasses) => BTreeMap::new(),
        Err(e) => return Err(DetectorError::Metrics(e)),
    };
    Ok(EvalReport { rows, per_class_map50, images: samples.len(), fps: None })
}

/// CPU description for FPS reports.
pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|s| s.trim().to_string()))
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}, {threads} thread(s), batch 1")
}

/// Images per second of forward pass plus NMS, one image at a time, after
/// `warmup` untimed images.
pub fn measure_fps(model: &Detector, images: &[SliceSample], vocab: &Vocabulary, warmup: usize, options: &EvalOptions) -> Result<FpsReport, DetectorError> {
    if images.len() <= warmup {
        return Err(DetectorError::Input(format!("need more than {warmup} images, got {}", images.len())));
    }
    let size = model.config().input_size;
    let prepared: Vec<SliceSample> = images.iter().map(|s| prepare(s, size)).collect();
    let embeddings = vocab.embeddings()?;
    let w = model.vocabulary_tensor(&[embeddings])?;
    let run = |s: &SliceSample| -> Result<usize, DetectorError> {
        let t: Tensor = batch_tensor(&[s.image.view()], size, model.device())?;
        let out = model.features(&t)?;
        let sims = model.similarities(&out, &w)?;
        let dets = model.detections(&out, &sims, 0.0, false)?.pop().unwrap_or_default();
        Ok(nms(&dets, options.nms_iou).len())
    };
    for s in &prepared[..warmup] {
        run(s)?;
    }
    let start = Instant::now();
    for s in &prepared[warmup..] {
        run(s)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    let n = prepared.len() - warmup;
    Ok(FpsReport { fps: fps(n, seconds), images: n, seconds, hardware: hardware_description() })
}

pub fn fps(images: usize, seconds: f64) -> f64 {
    images as f64 / seconds.max(f64::MIN_POSITIVE)
}

/// Mean of the mask values above 0.5; 0 when there are none.
pub fn approximate_mask_confidence(mask: ArrayView2<'_, f64>) -> f64 {
    let (sum, n) = mask.iter().filter(|&&v| v > 0.5).fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
