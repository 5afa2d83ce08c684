//! Safetensors checkpoints carrying the model configuration and its
//! fingerprint in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::SafeTensors;

use crate::config::{ModelConfig, TrainConfig};
use crate::model::Detector;
use crate::DetectorError;

pub const FORMAT: &str = "ovd-detector/1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub model: ModelConfig,
    pub fingerprint: String,
    pub epoch: usize,
    pub train_config: Option<String>,
}

pub fn save(model: &Detector, path: &Path, epoch: usize, train: Option<&TrainConfig>) -> Result<(), DetectorError> {
    let tensors: Vec<(String, Tensor)> = {
        let data = model.varmap().data().lock().expect("varmap lock");
        let mut v: Vec<(String, Tensor)> = data.iter().map(|(k, var)| (k.clone(), var.as_tensor().clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    };
    let cfg = model.config();
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("config_fingerprint".to_string(), cfg.fingerprint());
    meta.insert("model_config".to_string(), serde_json::to_string(cfg).expect("config serialises"));
    meta.insert("epoch".to_string(), epoch.to_string());
    if let Some(t) = train {
        meta.insert("train_config".to_string(), t.to_toml());
    }
    safetensors::serialize_to_file(tensors, Some(meta), path).map_err(|e| DetectorError::Checkpoint(e.to_string()))
}

pub fn inspect(path: &Path) -> Result<CheckpointInfo, DetectorError> {
    let bytes = std::fs::read(path).map_err(|e| DetectorError::Io(path.to_path_buf(), e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| DetectorError::Checkpoint(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| DetectorError::Checkpoint(format!("missing metadata field {k:?}")));
    if field("format")? != FORMAT {
        return Err(DetectorError::Checkpoint(format!("unsupported format {:?}", meta.get("format"))));
    }
    let model: ModelConfig = serde_json::from_str(&field("model_config")?).map_err(|e| DetectorError::Checkpoint(e.to_string()))?;
    let fingerprint = field("config_fingerprint")?;
    if model.fingerprint() != fingerprint {
        return Err(DetectorError::Checkpoint("stored configuration does not match its fingerprint".into()));
    }
    let epoch = field("epoch")?.parse().map_err(|_| DetectorError::Checkpoint("bad epoch field".into()))?;
    Ok(CheckpointInfo { model, fingerprint, epoch, train_config: meta.get("train_config").cloned() })
}

/// Load a checkpoint; when `expected` is given its fingerprint must match.
pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<(Detector, CheckpointInfo), DetectorError> {
    let info = inspect(path)?;
    if let Some(cfg) = expected {
        let want = cfg.fingerprint();
        if want != info.fingerprint {
            return Err(DetectorError::Fingerprint { expected: want, found: info.fingerprint });
        }
    }
    let mut model = Detector::new(&info.model, DType::F32, 0)?;
    model.varmap_mut().load(path)?;
    Ok((model, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::parameter_snapshot;

    #[test]
    fn round_trip_and_fingerprint_check() {
        let cfg = ModelConfig { input_size: 32, widths: [4, 8, 8], embed_dim: 8, dfl_bins: 8, token_grid: 2, ..Default::default() };
        let m = Detector::new(&cfg, DType::F32, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        save(&m, &p, 7, Some(&TrainConfig::default())).unwrap();
        let (back, info) = load(&p, Some(&cfg)).unwrap();
        assert_eq!(info.epoch, 7);
        assert_eq!(parameter_snapshot(&back).unwrap(), parameter_snapshot(&m).unwrap());
        assert!(info.train_config.unwrap().contains("learning_rate"));

        let other = ModelConfig { embed_dim: 16, ..cfg };
        assert!(matches!(load(&p, Some(&other)), Err(DetectorError::Fingerprint { .. })));
    }
}
