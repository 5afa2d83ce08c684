//! Declarative configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use ovd_core::encoder::EncoderBackend;
use ovd_core::pseudo_label::PseudoLabelConfig;
use ovd_core::vocabulary::{PromptTemplate, DEFAULT_VOCAB_SIZE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::DetectorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels; images are resized to it.
    pub input_size: usize,
    /// Channels of the three stride-2 backbone stages.
    pub widths: [usize; 3],
    /// Dilated 3x3 convolutions after the last stage.
    pub context_layers: usize,
    /// Object embedding dimension; must match the encoder.
    pub embed_dim: usize,
    /// DFL bins per box side.
    pub dfl_bins: usize,
    /// Side of the pooled image-token grid used to refine vocabulary embeddings.
    pub token_grid: usize,
    pub alpha_init: f64,
    pub beta_init: f64,
    /// Prior objectness probability at initialisation.
    pub objectness_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 160,
            widths: [16, 32, 64],
            context_layers: 2,
            embed_dim: 64,
            dfl_bins: 16,
            token_grid: 3,
            alpha_init: 10.0,
            beta_init: 0.0,
            objectness_prior: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        8
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.stride()
    }

    pub fn regions(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::Config(m.to_string()));
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.stride()) {
            return bad("input_size must be a positive multiple of 8");
        }
        if self.grid() < self.token_grid || self.token_grid == 0 {
            return bad("token_grid must be between 1 and input_size / 8");
        }
        if self.dfl_bins < 2 {
            return bad("dfl_bins must be at least 2");
        }
        if self.widths.contains(&0) || self.embed_dim == 0 {
            return bad("layer widths and embed_dim must be positive");
        }
        if !(self.alpha_init > 0.0) || !self.beta_init.is_finite() {
            return bad("alpha_init must be positive and beta_init finite");
        }
        if !(0.0 < self.objectness_prior && self.objectness_prior < 1.0) {
            return bad("objectness_prior must lie in (0, 1)");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Iou,
    #[default]
    Ciou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub iou_kind: IouKind,
    /// Weight of the objectness term folded into the contrastive loss.
    pub objectness_weight: f64,
    /// Weight of positive cells in the objectness term.
    pub positive_weight: f64,
    pub contrastive_weight: f64,
    pub iou_weight: f64,
    pub dfl_weight: f64,
    /// Cells whose centre is within this many strides of a box centre, and
    /// inside the box, are assigned to it.
    pub center_radius: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            iou_kind: IouKind::Ciou,
            objectness_weight: 1.0,
            positive_weight: 1.0,
            contrastive_weight: 1.0,
            iou_weight: 1.0,
            dfl_weight: 1.0,
            center_radius: 1.5,
        }
    }
}

/// Input files for training and evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub matrix: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Directory image paths in the record files are relative to.
    pub root: Option<PathBuf>,
    /// Classes added to the negative pool besides those seen in training.
    pub extra_negatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub vocab_size: usize,
    /// Enables the second pass with pseudo-labels and feature substitution.
    pub pseudo_labeling: bool,
    /// Predictions below this confidence are never pseudo-label candidates.
    pub candidate_min_confidence: f64,
    pub nms_iou: f64,
    /// Detections kept per image at evaluation.
    pub max_detections: usize,
    pub prompt: PromptTemplate,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub pseudo_label: PseudoLabelConfig,
    pub encoder: EncoderBackend,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 60,
            batch_size: 16,
            learning_rate: 2e-4,
            weight_decay: 0.05,
            vocab_size: DEFAULT_VOCAB_SIZE,
            pseudo_labeling: true,
            candidate_min_confidence: 0.25,
            nms_iou: ovd_core::geometry::DEFAULT_NMS_IOU,
            max_detections: 100,
            prompt: PromptTemplate::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            pseudo_label: PseudoLabelConfig::default(),
            encoder: EncoderBackend::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, DetectorError> {
        let cfg: Self = toml::from_str(text).map_err(|e| DetectorError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let text = std::fs::read_to_string(path).map_err(|e| DetectorError::Io(path.to_path_buf(), e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.data.resolve_against(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        self.model.validate()?;
        let bad = |m: &str| Err(DetectorError::Config(m.to_string()));
        if self.batch_size == 0 || self.vocab_size == 0 {
            return bad("batch_size and vocab_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        let p = &self.pseudo_label;
        if !(0.0..=1.0).contains(&p.iou_threshold) || !(0.0..=1.0).contains(&p.confidence_threshold) {
            return bad("pseudo_label thresholds must lie in [0, 1]");
        }
        if !(p.expand_factor >= 1.0) {
            return bad("pseudo_label.expand_factor must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("nms_iou must lie in [0, 1]");
        }
        Ok(())
    }
}

impl DataConfig {
    fn resolve_against(&mut self, dir: &Path) {
        for p in [&mut self.train, &mut self.val, &mut self.matrix, &mut self.manifest, &mut self.root].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml("epochs = 3\n[pseudo_label]\nconfidence_threshold = 0.8\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.pseudo_label.confidence_threshold, 0.8);
        assert_eq!(partial.pseudo_label.iou_threshold, 0.3);
        assert_eq!(partial.pseudo_label.expand_factor, 1.3);
        assert_eq!(partial.pseudo_label.max_substitutions, 5);
        assert_eq!(partial.learning_rate, 2e-4);
        assert_eq!(partial.weight_decay, 0.05);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("[model]\ninput_size = 100").is_err());
        assert!(TrainConfig::from_toml("no_such_key = 1").is_err());
        assert!(TrainConfig::from_toml("[pseudo_label]\nexpand_factor = 0.5").is_err());
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = ModelConfig::default();
        let b = ModelConfig { embed_dim: 32, ..a.clone() };
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
