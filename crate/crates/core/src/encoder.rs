//! Text/image encoders sharing one embedding space.
//!
//! The real vision-language foundation model is reached through
//! [`PretrainedEncoder`], which consumes embeddings and projection weights
//! exported from it. Everything else in the crate is exercised with the two
//! deterministic mocks:
//!
//! * [`MockEncoder`]: text is a SHA-256 expansion of the prompt bytes; an
//!   image crop is resampled onto a fixed grid, centred, projected by a
//!   seeded Gaussian matrix and unit-normalised.
//! * [`AlignedMockEncoder`]: knows the synthetic organ catalogue and places
//!   a class name and crops of that class's shape next to each other, with
//!   all other pairs (nearly) orthogonal.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::synthetic::SyntheticCatalog;

pub const DEFAULT_EMBED_DIM: usize = 64;
/// Side of the grid image crops are resampled to before projection.
pub const MOCK_GRID: usize = 8;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("crop is degenerate ({height}x{width}x{channels}); need at least 1x1x3")]
    DegenerateCrop { height: usize, width: usize, channels: usize },
    #[error("no exported embedding for prompt {0:?}")]
    UnknownPrompt(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("failed to load encoder weights from {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("the aligned mock needs the synthetic organ catalogue")]
    MissingCatalog,
}

/// A dense embedding. Stored unnormalised; similarity normalises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// Cosine similarity, `None` if either vector is zero or dims differ.
    pub fn cosine(&self, other: &Self) -> Option<f64> {
        if self.dim() != other.dim() {
            return None;
        }
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 {
            return None;
        }
        let dot: f64 = self.0.iter().zip(&other.0).map(|(&a, &b)| a as f64 * b as f64).sum();
        Some(dot / (na * nb))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn to_embedding(v: Vec<f64>) -> EmbeddingVector {
    EmbeddingVector(v.into_iter().map(|x| x as f32).collect())
}

/// The encoder surface the pipeline relies on. Implementations must be
/// deterministic and read-only after construction.
pub trait FoundationEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector, EncoderError>;
    /// `crop` is `H x W x 3`, 8-bit.
    fn encode_image(&self, crop: ArrayView3<'_, u8>) -> Result<EmbeddingVector, EncoderError>;
}

fn check_crop(crop: &ArrayView3<'_, u8>) -> Result<(), EncoderError> {
    let (h, w, c) = crop.dim();
    if h == 0 || w == 0 || c != 3 {
        return Err(EncoderError::DegenerateCrop { height: h, width: w, channels: c });
    }
    Ok(())
}

/// Bilinear resample onto a `grid x grid x 3` vector in `[-0.5, 0.5]`,
/// laid out row-major as (row, col, channel).
pub fn resample_crop(crop: ArrayView3<'_, u8>, grid: usize) -> Vec<f64> {
    let (h, w, _) = crop.dim();
    let sample = |y: f64, x: f64, c: usize| -> f64 {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let p = |yy: usize, xx: usize| crop[[yy, xx, c]] as f64;
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    };
    let mut out = Vec::with_capacity(grid * grid * 3);
    for gy in 0..grid {
        let y = (gy as f64 + 0.5) * h as f64 / grid as f64 - 0.5;
        for gx in 0..grid {
            let x = (gx as f64 + 0.5) * w as f64 / grid as f64 - 0.5;
            for c in 0..3 {
                out.push(sample(y, x, c) / 255.0 - 0.5);
            }
        }
    }
    out
}

fn hash_expand(seed: u64, prompt: &str, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let mut counter = 0u32;
    while out.len() < dim {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(counter.to_le_bytes());
        h.update(prompt.as_bytes());
        for chunk in h.finalize().chunks_exact(4) {
            if out.len() == dim {
                break;
            }
            let u = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            out.push(u as f64 / u32::MAX as f64 * 2.0 - 1.0);
        }
        counter += 1;
    }
    out
}

/// Deterministic offline encoder.
#[derive(Debug, Clone)]
pub struct MockEncoder {
    dim: usize,
    seed: u64,
    /// `dim x (MOCK_GRID^2 * 3)`, entries N(0, 1/n).
    projection: Array2<f64>,
}

impl MockEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let n = MOCK_GRID * MOCK_GRID * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n as f64).sqrt();
        let projection = Array2::from_shape_fn((dim, n), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { dim, seed, projection }
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    fn project(&self, features: &[f64]) -> Vec<f64> {
        self.projection.rows().into_iter().map(|row| row.iter().zip(features).map(|(a, b)| a * b).sum()).collect()
    }
}

impl FoundationEncoder for MockEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector, EncoderError> {
        if prompt.is_empty() {
            return Err(EncoderError::EmptyPrompt);
        }
        Ok(to_embedding(unit(hash_expand(self.seed, prompt, self.dim))))
    }

    fn encode_image(&self, crop: ArrayView3<'_, u8>) -> Result<EmbeddingVector, EncoderError> {
        check_crop(&crop)?;
        let features = resample_crop(crop, MOCK_GRID);
        Ok(to_embedding(unit(self.project(&features))))
    }
}

/// Mock whose text and image towers agree on the synthetic organ classes.
#[derive(Debug, Clone)]
pub struct AlignedMockEncoder {
    base: MockEncoder,
    names: Vec<String>,
    /// Orthonormal class prototypes, one per catalogue class.
    prototypes: Vec<Vec<f64>>,
    /// Expected 8-bit foreground intensity of each class.
    intensities: Vec<f64>,
}

/// Weight of the crop-specific component added to a recognised prototype.
const ALIGNED_JITTER: f64 = 0.2;
/// Pixels at or below this 8-bit value count as background.
const FOREGROUND_FLOOR: u8 = 20;

impl AlignedMockEncoder {
    pub fn new(catalog: &SyntheticCatalog, dim: usize, seed: u64) -> Self {
        let base = MockEncoder::new(dim, seed);
        let mut prototypes: Vec<Vec<f64>> = Vec::new();
        for class in catalog.classes() {
            let v = hash_expand(seed ^ 0xa11c_e5ed, &class.name, dim);
            prototypes.push(unit(orthogonalise(v, &prototypes)));
        }
        Self {
            base,
            names: catalog.classes().iter().map(|c| c.name.clone()).collect(),
            prototypes,
            intensities: catalog.classes().iter().map(|c| catalog.display_intensity(c) as f64).collect(),
        }
    }

    pub fn prototype(&self, class: &str) -> Option<EmbeddingVector> {
        let i = self.names.iter().position(|n| n == class)?;
        Some(to_embedding(self.prototypes[i].clone()))
    }

    /// Catalogue class whose intensity best explains the crop's foreground.
    pub fn recognise(&self, crop: ArrayView3<'_, u8>) -> Option<usize> {
        let mut fg: Vec<u8> = crop.index_axis(ndarray::Axis(2), 0).iter().copied().filter(|&v| v > FOREGROUND_FLOOR).collect();
        if fg.is_empty() {
            return None;
        }
        let mid = fg.len() / 2;
        let median = *fg.select_nth_unstable(mid).1 as f64;
        self.intensities
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - median).abs().total_cmp(&(b.1 - median).abs()))
            .map(|(i, _)| i)
    }

    fn off_manifold(&self, v: Vec<f64>) -> Vec<f64> {
        unit(orthogonalise(v, &self.prototypes))
    }
}

fn orthogonalise(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Vec<f64> {
    for b in basis {
        let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
    v
}

impl FoundationEncoder for AlignedMockEncoder {
    fn dim(&self) -> usize {
        self.base.dim
    }

    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector, EncoderError> {
        if prompt.is_empty() {
            return Err(EncoderError::EmptyPrompt);
        }
        let key = prompt.trim().to_lowercase();
        match self.names.iter().position(|n| n.to_lowercase() == key) {
            Some(i) => Ok(to_embedding(self.prototypes[i].clone())),
            None => Ok(to_embedding(self.off_manifold(hash_expand(self.base.seed, prompt, self.base.dim)))),
        }
    }

    fn encode_image(&self, crop: ArrayView3<'_, u8>) -> Result<EmbeddingVector, EncoderError> {
        check_crop(&crop)?;
        let jitter = self.off_manifold(self.base.project(&resample_crop(crop, MOCK_GRID)));
        match self.recognise(crop) {
            Some(i) => {
                let v = self.prototypes[i].iter().zip(&jitter).map(|(p, j)| p + ALIGNED_JITTER * j).collect();
                Ok(to_embedding(unit(v)))
            }
            None => Ok(to_embedding(jitter)),
        }
    }
}

/// Adapter over embeddings exported from a pretrained vision-language model:
/// a prompt -> text embedding table and a linear image projection applied to
/// the resampled crop grid.
#[derive(Debug, Clone)]
pub struct PretrainedEncoder {
    dim: usize,
    grid: usize,
    text: HashMap<String, Vec<f32>>,
    projection: Array2<f64>,
}

impl PretrainedEncoder {
    pub fn new(text: HashMap<String, Vec<f32>>, projection: Array2<f64>, grid: usize) -> Result<Self, EncoderError> {
        let dim = projection.nrows();
        if projection.ncols() != grid * grid * 3 {
            return Err(EncoderError::Dimension { expected: grid * grid * 3, got: projection.ncols() });
        }
        if let Some(bad) = text.values().find(|v| v.len() != dim) {
            return Err(EncoderError::Dimension { expected: dim, got: bad.len() });
        }
        Ok(Self { dim, grid, text, projection })
    }

    /// `text_table` is JSON `{prompt: [f32; D]}`; `projection` an `.npy`
    /// `f64`/`f32` matrix of shape `D x (grid*grid*3)`.
    pub fn load(text_table: &Path, projection: &Path, grid: usize) -> Result<Self, EncoderError> {
        let load_err = |path: &Path, reason: String| EncoderError::Load { path: path.to_path_buf(), reason };
        let raw = std::fs::read_to_string(text_table).map_err(|e| load_err(text_table, e.to_string()))?;
        let text: HashMap<String, Vec<f32>> = serde_json::from_str(&raw).map_err(|e| load_err(text_table, e.to_string()))?;
        let matrix = crate::curation::io::read_npy_f64(projection).map_err(|e| load_err(projection, e.to_string()))?;
        let matrix = matrix.into_dimensionality::<ndarray::Ix2>().map_err(|e| load_err(projection, e.to_string()))?;
        Self::new(text, matrix, grid)
    }
}

impl FoundationEncoder for PretrainedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector, EncoderError> {
        if prompt.is_empty() {
            return Err(EncoderError::EmptyPrompt);
        }
        self.text.get(prompt).cloned().map(EmbeddingVector).ok_or_else(|| EncoderError::UnknownPrompt(prompt.to_string()))
    }

    fn encode_image(&self, crop: ArrayView3<'_, u8>) -> Result<EmbeddingVector, EncoderError> {
        check_crop(&crop)?;
        let features = resample_crop(crop, self.grid);
        let v = self.projection.rows().into_iter().map(|row| row.iter().zip(&features).map(|(a, b)| a * b).sum()).collect();
        Ok(to_embedding(v))
    }
}

/// Encoder selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum EncoderBackend {
    Mock {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    AlignedMock {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    Pretrained {
        text_embeddings: PathBuf,
        image_projection: PathBuf,
        #[serde(default = "default_grid")]
        grid: usize,
    },
}

fn default_dim() -> usize {
    DEFAULT_EMBED_DIM
}

fn default_grid() -> usize {
    MOCK_GRID
}

impl Default for EncoderBackend {
    fn default() -> Self {
        EncoderBackend::AlignedMock { dim: DEFAULT_EMBED_DIM, seed: 0 }
    }
}

impl EncoderBackend {
    pub fn build(&self, catalog: Option<&SyntheticCatalog>) -> Result<Box<dyn FoundationEncoder>, EncoderError> {
        Ok(match self {
            EncoderBackend::Mock { dim, seed } => Box::new(MockEncoder::new(*dim, *seed)),
            EncoderBackend::AlignedMock { dim, seed } => {
                let catalog = catalog.ok_or(EncoderError::MissingCatalog)?;
                Box::new(AlignedMockEncoder::new(catalog, *dim, *seed))
            }
            EncoderBackend::Pretrained { text_embeddings, image_projection, grid } => {
                Box::new(PretrainedEncoder::load(text_embeddings, image_projection, *grid)?)
            }
        })
    }
}
