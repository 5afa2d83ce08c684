//! Two-pass training: predict, update targets and vocabularies with the
//! pseudo-label engine, then score the updated vocabularies and take the
//! loss against the updated targets.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ovd_core::curation::SliceSample;
use ovd_core::encoder::FoundationEncoder;
use ovd_core::geometry::nms;
use ovd_core::presence::PresenceMatrix;
use ovd_core::pseudo_label::{apply, AuditCounts, TrainingTargets};
use ovd_core::vocabulary::{build_vocabulary, Vocabulary};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::prepare;
use crate::loss::{detection_loss, ImageTargets, LossBreakdown};
use crate::model::{batch_tensor, Detector};
use crate::DetectorError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: LossBreakdown,
    pub audit: AuditCounts,
}

/// One line of the per-epoch audit log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub images: usize,
    /// Mean of the per-step breakdowns.
    pub loss: LossBreakdown,
    pub audit: AuditCounts,
    pub seconds: f64,
}

pub struct Trainer {
    model: Detector,
    optimizer: AdamW,
    config: TrainConfig,
    encoder: Box<dyn FoundationEncoder>,
    matrix: Option<PresenceMatrix>,
    pool: Vec<String>,
    rng: ChaCha8Rng,
    epoch: usize,
}

/// Sorted union of annotated classes and `extra`.
pub fn class_pool(samples: &[SliceSample], extra: &[String]) -> Vec<String> {
    let mut set: std::collections::BTreeSet<String> = samples.iter().flat_map(|s| s.classes()).collect();
    set.extend(extra.iter().cloned());
    set.into_iter().collect()
}

/// The generator behind vocabulary sampling and epoch shuffling.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e)
}

impl Trainer {
    pub fn new(
        model: Detector,
        config: TrainConfig,
        encoder: Box<dyn FoundationEncoder>,
        matrix: Option<PresenceMatrix>,
        pool: Vec<String>,
    ) -> Result<Self, DetectorError> {
        config.validate()?;
        if encoder.dim() != model.config().embed_dim {
            return Err(DetectorError::Dimension { expected: model.config().embed_dim, got: encoder.dim() });
        }
        if config.pseudo_labeling && matrix.is_none() {
            return Err(DetectorError::Config("pseudo_labeling needs a presence matrix".into()));
        }
        if pool.len() < config.vocab_size {
            log::warn!("class pool has {} classes; vocabularies hold {} entries instead of {}", pool.len(), pool.len(), config.vocab_size);
        }
        let params = ParamsAdamW { lr: config.learning_rate, weight_decay: config.weight_decay, ..Default::default() };
        let optimizer = AdamW::new(model.varmap().all_vars(), params)?;
        let rng = training_rng(config.seed);
        Ok(Self { model, optimizer, config, encoder, matrix, pool, rng, epoch: 0 })
    }

    pub fn model(&self) -> &Detector {
        &self.model
    }

    pub fn into_model(self) -> Detector {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn encoder(&self) -> &dyn FoundationEncoder {
        self.encoder.as_ref()
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn vocabulary_for(&mut self, sample: &SliceSample) -> Result<Vocabulary, DetectorError> {
        let positives: Vec<String> = sample.classes().into_iter().collect();
        let mut vocab = build_vocabulary(&positives, &self.pool, self.config.vocab_size, &mut self.rng)?.vocabulary;
        vocab.encode_labels(self.encoder.as_ref(), &self.config.prompt)?;
        Ok(vocab)
    }

    /// Loss of one batch of prepared samples, without an optimiser step.
    pub fn batch_loss(&mut self, batch: &[&SliceSample]) -> Result<(Tensor, StepStats), DetectorError> {
        let vocabs = batch.iter().map(|s| self.vocabulary_for(s)).collect::<Result<Vec<_>, _>>()?;
        let size = self.model.config().input_size;
        let images = batch_tensor(&batch.iter().map(|s| s.image.view()).collect::<Vec<_>>(), size, self.model.device())?;
        let out = self.model.features(&images)?;
        let embed = |v: &[Vocabulary]| -> Result<Tensor, DetectorError> {
            let e = v.iter().map(|v| v.embeddings()).collect::<Result<Vec<_>, _>>()?;
            self.model.vocabulary_tensor(&e)
        };
        let sims_first = self.model.similarities(&out, &embed(&vocabs)?)?;

        let mut audit = AuditCounts::default();
        let (sims, targets) = match (&self.matrix, self.config.pseudo_labeling) {
            (Some(matrix), true) => {
                let dets = self.model.detections(&out, &sims_first, self.config.candidate_min_confidence, false)?;
                let mut updated = Vec::with_capacity(batch.len());
                for ((sample, vocab), dets) in batch.iter().zip(vocabs).zip(dets) {
                    let kept = nms(&dets, self.config.nms_iou);
                    let outcome = apply(&kept, sample, matrix, vocab, self.encoder.as_ref(), &self.config.pseudo_label, &mut self.rng)?;
                    audit.add(&outcome.counts);
                    updated.push(outcome.targets);
                }
                let vocabs: Vec<Vocabulary> = updated.iter().map(|t| t.vocabulary.clone()).collect();
                (self.model.similarities(&out, &embed(&vocabs)?)?, updated)
            }
            _ => {
                let targets = batch
                    .iter()
                    .zip(vocabs)
                    .map(|(s, v)| TrainingTargets::from_annotations(&s.annotations, v))
                    .collect::<Result<Vec<_>, _>>()?;
                (sims_first, targets)
            }
        };
        let image_targets: Vec<ImageTargets> = targets
            .iter()
            .map(|t| ImageTargets {
                boxes: t.boxes.iter().map(|b| b.gt.bbox).collect(),
                entries: t.boxes.iter().map(|b| b.entry).collect(),
                box_supervision: true,
            })
            .collect();
        let (loss, breakdown) = detection_loss(&self.model, &out, &sims, &image_targets, &self.config.loss)?;
        if !breakdown.total.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|s| s.sample_id.as_str()).collect();
            return Err(DetectorError::NonFinite(format!("loss {breakdown:?} on samples {ids:?}")));
        }
        Ok((loss, StepStats { loss: breakdown, audit }))
    }

    pub fn train_step(&mut self, batch: &[&SliceSample]) -> Result<StepStats, DetectorError> {
        let (loss, stats) = self.batch_loss(batch)?;
        self.optimizer.backward_step(&loss)?;
        Ok(stats)
    }

    /// One pass over `samples` (already prepared to the input size) in a
    /// seeded random order.
    pub fn train_epoch(&mut self, samples: &[SliceSample]) -> Result<EpochStats, DetectorError> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut stats = EpochStats { epoch: self.epoch + 1, ..Default::default() };
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&SliceSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let step = self.train_step(&batch)?;
            let l = &step.loss;
            sum.contrastive += l.contrastive;
            sum.region_text += l.region_text;
            sum.objectness += l.objectness;
            sum.iou_loss += l.iou_loss;
            sum.dfl += l.dfl;
            sum.lambda_indicator += l.lambda_indicator;
            sum.total += l.total;
            sum.assigned_regions += l.assigned_regions;
            sum.dfl_clamped += l.dfl_clamped;
            stats.audit.add(&step.audit);
            stats.steps += 1;
            stats.images += batch.len();
        }
        let k = stats.steps.max(1) as f64;
        stats.loss = LossBreakdown {
            contrastive: sum.contrastive / k,
            region_text: sum.region_text / k,
            objectness: sum.objectness / k,
            iou_loss: sum.iou_loss / k,
            dfl: sum.dfl / k,
            lambda_indicator: sum.lambda_indicator / k,
            total: sum.total / k,
            ..sum
        };
        stats.seconds = start.elapsed().as_secs_f64();
        self.epoch += 1;
        Ok(stats)
    }

    /// Train for the configured number of epochs, appending one JSON line per
    /// epoch to `audit_log` when given. `on_epoch` sees the model after each
    /// epoch; an error from it stops training.
    pub fn fit(
        &mut self,
        samples: &[SliceSample],
        audit_log: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochStats, &Detector) -> Result<(), DetectorError>,
    ) -> Result<Vec<EpochStats>, DetectorError> {
        let size = self.model.config().input_size;
        let prepared: Vec<SliceSample> = samples.iter().map(|s| prepare(s, size)).collect();
        let mut log = match audit_log {
            Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p).map_err(|e| DetectorError::Io(p.to_path_buf(), e))?),
            None => None,
        };
        let mut all = Vec::new();
        for _ in 0..self.config.epochs {
            let stats = self.train_epoch(&prepared)?;
            if let (Some(f), Some(p)) = (log.as_mut(), audit_log) {
                let line = serde_json::to_string(&stats).expect("stats serialise");
                writeln!(f, "{line}").map_err(|e| DetectorError::Io(p.to_path_buf(), e))?;
            }
            on_epoch(&stats, &self.model)?;
            all.push(stats);
        }
        Ok(all)
    }
}

/// Read an audit log back.
pub fn read_audit_log(path: &Path) -> Result<Vec<EpochStats>, DetectorError> {
    let text = std::fs::read_to_string(path).map_err(|e| DetectorError::Io(path.to_path_buf(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| DetectorError::Config(format!("{}: {e}", path.display()))))
        .collect()
}

/// Model weights as f32, for comparing runs.
pub fn parameter_snapshot(model: &Detector) -> Result<Vec<(String, Vec<f32>)>, DetectorError> {
    let data = model.varmap().data().lock().expect("varmap lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    names
        .into_iter()
        .map(|n| Ok((n.clone(), data[n].as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)))
        .collect()
}
