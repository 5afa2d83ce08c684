//! The detector network.
//!
//! Backbone: three stride-2 convolutions and a few dilated context layers,
//! giving one region per 8x8 cell. The vocabulary is refined by attending
//! from each entry to pooled image tokens, so every similarity column only
//! depends on its own entry. The head predicts per cell a DFL box
//! distribution, an objectness logit and an object embedding.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder, VarMap};
use ndarray::ArrayView3;
use ovd_core::encoder::EmbeddingVector;
use ovd_core::geometry::{BBox, Detection};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::DetectorError;

const NORM_EPS: f64 = 1e-12;

struct Fusion {
    token_proj: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    gate: Tensor,
}

pub struct Detector {
    cfg: ModelConfig,
    varmap: VarMap,
    device: Device,
    dtype: DType,
    stages: Vec<Conv2d>,
    context: Vec<Conv2d>,
    reg: (Conv2d, Conv2d),
    cls: (Conv2d, Conv2d),
    fusion: Fusion,
    alpha: Tensor,
    beta: Tensor,
    anchors: Vec<[f64; 2]>,
}

/// Vocabulary-independent outputs of one forward pass.
pub struct HeadOutput {
    /// `N x K x 4 x B`.
    pub box_logits: Tensor,
    /// `N x K`.
    pub obj_logits: Tensor,
    /// `N x K x D`.
    pub embeddings: Tensor,
    /// `N x T x D` pooled image tokens.
    pub tokens: Tensor,
}

impl HeadOutput {
    pub fn batch(&self) -> usize {
        self.obj_logits.dims()[0]
    }
}

fn conv(vb: &VarBuilder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, dilation: usize) -> candle_core::Result<Conv2d> {
    let cfg = Conv2dConfig { padding: dilation * (k / 2), stride, dilation, groups: 1, cudnn_fwd_algo: None };
    candle_nn::conv2d(cin, cout, k, cfg, vb.pp(name))
}

impl Detector {
    /// Build with parameters drawn from a seeded generator.
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self, DetectorError> {
        cfg.validate()?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &device);
        let [w1, w2, w3] = cfg.widths;
        let stages = vec![
            conv(&vb, "stage1", 3, w1, 3, 2, 1)?,
            conv(&vb, "stage2", w1, w2, 3, 2, 1)?,
            conv(&vb, "stage3", w2, w3, 3, 2, 1)?,
        ];
        let context = (0..cfg.context_layers).map(|i| conv(&vb, &format!("context{i}"), w3, w3, 3, 1, 2)).collect::<Result<_, _>>()?;
        let reg = (conv(&vb, "reg.hidden", w3, w3, 3, 1, 1)?, conv(&vb, "reg.out", w3, 4 * cfg.dfl_bins, 1, 1, 1)?);
        let cls = (conv(&vb, "cls.hidden", w3, w3, 3, 1, 1)?, conv(&vb, "cls.out", w3, cfg.embed_dim + 1, 1, 1, 1)?);
        let d = cfg.embed_dim;
        let fusion = Fusion {
            token_proj: candle_nn::linear(w3, d, vb.pp("fusion.tokens"))?,
            query: candle_nn::linear(d, d, vb.pp("fusion.query"))?,
            key: candle_nn::linear(d, d, vb.pp("fusion.key"))?,
            value: candle_nn::linear(d, d, vb.pp("fusion.value"))?,
            out: candle_nn::linear(d, d, vb.pp("fusion.out"))?,
            gate: vb.get(1, "fusion.gate")?,
        };
        let alpha = vb.get(1, "sim.alpha")?;
        let beta = vb.get(1, "sim.beta")?;
        let (g, s) = (cfg.grid(), cfg.stride() as f64);
        let anchors = (0..g * g).map(|k| [((k % g) as f64 + 0.5) * s, ((k / g) as f64 + 0.5) * s]).collect();
        let model = Self { cfg: cfg.clone(), varmap, device, dtype, stages, context, reg, cls, fusion, alpha, beta, anchors };
        model.reinitialise(seed)?;
        Ok(model)
    }

    /// Overwrite every parameter from a generator seeded with `seed`.
    fn reinitialise(&self, seed: u64) -> Result<(), DetectorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        let prior = self.cfg.objectness_prior;
        for name in names {
            let var = &data[name];
            let dims = var.dims().to_vec();
            let n: usize = dims.iter().product();
            let values: Vec<f64> = if name.ends_with(".weight") {
                let fan_in: usize = dims[1..].iter().product();
                let std = if name.contains(".out.") || name.starts_with("fusion.out") { 0.01 } else { (2.0 / fan_in as f64).sqrt() };
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if name == "cls.out.bias" {
                let mut v = vec![0.0; n];
                v[n - 1] = (prior / (1.0 - prior)).ln();
                v
            } else if name == "sim.alpha" {
                vec![self.cfg.alpha_init; n]
            } else if name == "sim.beta" {
                vec![self.cfg.beta_init; n]
            } else {
                vec![0.0; n]
            };
            let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn varmap_mut(&mut self) -> &mut VarMap {
        &mut self.varmap
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Cell centres in input pixels, row-major.
    pub fn anchors(&self) -> &[[f64; 2]] {
        &self.anchors
    }

    pub fn alpha_beta(&self) -> Result<(f64, f64), DetectorError> {
        let a = self.alpha.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
        let b = self.beta.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
        Ok((a, b))
    }

    /// `images`: `N x 3 x S x S`, values in `[0, 1]`.
    pub fn features(&self, images: &Tensor) -> Result<HeadOutput, DetectorError> {
        let s = self.cfg.input_size;
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(DetectorError::Input(format!("expected N x 3 x {s} x {s}, got {dims:?}")));
        }
        let n = dims[0];
        let mut x = images.to_dtype(self.dtype)?;
        for stage in &self.stages {
            x = candle_nn::ops::silu(&stage.forward(&x)?)?;
        }
        for layer in &self.context {
            x = (candle_nn::ops::silu(&layer.forward(&x)?)? + &x)?;
        }
        let (k, b, d) = (self.cfg.regions(), self.cfg.dfl_bins, self.cfg.embed_dim);
        let reg = self.reg.1.forward(&candle_nn::ops::silu(&self.reg.0.forward(&x)?)?)?;
        let box_logits = reg.reshape((n, 4 * b, k))?.transpose(1, 2)?.reshape((n, k, 4, b))?;
        let cls = self.cls.1.forward(&candle_nn::ops::silu(&self.cls.0.forward(&x)?)?)?;
        let cls = cls.reshape((n, d + 1, k))?.transpose(1, 2)?;
        let embeddings = cls.narrow(2, 0, d)?.contiguous()?;
        let obj_logits = cls.narrow(2, d, 1)?.squeeze(2)?.contiguous()?;

        let tg = self.cfg.token_grid;
        let pool = self.cfg.grid() / tg;
        let pooled = x.avg_pool2d(pool)?.narrow(2, 0, tg)?.narrow(3, 0, tg)?;
        let c = pooled.dims()[1];
        let tokens = pooled.reshape((n, c, tg * tg))?.transpose(1, 2)?.contiguous()?;
        let tokens = self.fusion.token_proj.forward(&tokens)?;
        Ok(HeadOutput { box_logits, obj_logits, embeddings, tokens })
    }

    /// Vocabulary embeddings after attending to the image tokens.
    /// `vocab`: `N x V x D`.
    pub fn refine_vocabulary(&self, out: &HeadOutput, vocab: &Tensor) -> Result<Tensor, DetectorError> {
        let f = &self.fusion;
        let d = self.cfg.embed_dim;
        let q = f.query.forward(vocab)?;
        let k = f.key.forward(&out.tokens)?;
        let v = f.value.forward(&out.tokens)?;
        let attn = candle_nn::ops::softmax(&(q.matmul(&k.transpose(1, 2)?)? / (d as f64).sqrt())?, D::Minus1)?;
        let update = f.out.forward(&attn.matmul(&v)?)?;
        Ok(vocab.broadcast_add(&update.broadcast_mul(&f.gate)?)?)
    }

    /// Region-entry similarity logits `N x K x V`.
    pub fn similarities(&self, out: &HeadOutput, vocab: &Tensor) -> Result<Tensor, DetectorError> {
        let dims = vocab.dims();
        if dims.len() != 3 || dims[0] != out.batch() {
            return Err(DetectorError::Input(format!("vocabulary tensor must be N x V x D, got {dims:?}")));
        }
        if dims[2] != self.cfg.embed_dim {
            return Err(DetectorError::Dimension { expected: self.cfg.embed_dim, got: dims[2] });
        }
        let w = l2_normalize(&self.refine_vocabulary(out, &vocab.to_dtype(self.dtype)?)?)?;
        let e = l2_normalize(&out.embeddings)?;
        let cos = e.matmul(&w.transpose(1, 2)?.contiguous()?)?;
        Ok(cos.broadcast_mul(&self.alpha)?.broadcast_add(&self.beta)?)
    }

    /// Decoded boxes `N x K x 4` in input pixels.
    pub fn decode_boxes(&self, out: &HeadOutput) -> Result<Tensor, DetectorError> {
        let distances = expected_distances(&out.box_logits)?;
        let stride = self.cfg.stride() as f64;
        let flat: Vec<f64> = self.anchors.iter().flat_map(|a| [a[0], a[1], a[0], a[1]]).collect();
        let k = self.anchors.len();
        let centre = Tensor::from_vec(flat, (1, k, 4), &self.device)?.to_dtype(self.dtype)?;
        let sign = Tensor::new(&[-1.0f64, -1.0, 1.0, 1.0], &self.device)?.to_dtype(self.dtype)?.reshape((1, 1, 4))?;
        // x_min = cx - l, y_min = cy - t, x_max = cx + r, y_max = cy + b
        Ok(centre.broadcast_add(&(distances * stride)?.broadcast_mul(&sign)?)?)
    }

    /// Stack per-image vocabulary embeddings into `N x V x D`.
    pub fn vocabulary_tensor(&self, vocabs: &[Vec<&EmbeddingVector>]) -> Result<Tensor, DetectorError> {
        let v = vocabs.first().map(|x| x.len()).unwrap_or(0);
        let d = self.cfg.embed_dim;
        let mut data = Vec::with_capacity(vocabs.len() * v * d);
        for vocab in vocabs {
            if vocab.len() != v {
                return Err(DetectorError::Input("vocabularies in one batch must have equal size".into()));
            }
            for e in vocab {
                if e.dim() != d {
                    return Err(DetectorError::Dimension { expected: d, got: e.dim() });
                }
                data.extend_from_slice(e.as_slice());
            }
        }
        Ok(Tensor::from_vec(data, (vocabs.len(), v, d), &self.device)?.to_dtype(self.dtype)?)
    }

    /// One detection per region: class = best entry, confidence =
    /// sigmoid(objectness) times that entry's softmax probability. Regions
    /// below `min_confidence` are skipped.
    pub fn detections(&self, out: &HeadOutput, sims: &Tensor, min_confidence: f64, with_embeddings: bool) -> Result<Vec<Vec<Detection>>, DetectorError> {
        let boxes: Vec<Vec<Vec<f32>>> = self.decode_boxes(out)?.to_dtype(DType::F32)?.to_vec3()?;
        let obj: Vec<Vec<f32>> = candle_nn::ops::sigmoid(&out.obj_logits)?.to_dtype(DType::F32)?.to_vec2()?;
        let probs: Vec<Vec<Vec<f32>>> = candle_nn::ops::softmax_last_dim(sims)?.to_dtype(DType::F32)?.to_vec3()?;
        let emb: Option<Vec<Vec<Vec<f32>>>> = if with_embeddings { Some(out.embeddings.to_dtype(DType::F32)?.to_vec3()?) } else { None };
        let size = self.cfg.input_size as f64;
        let mut all = Vec::with_capacity(boxes.len());
        for n in 0..boxes.len() {
            let mut dets = Vec::new();
            for k in 0..boxes[n].len() {
                let (class, p) = probs[n][k].iter().enumerate().fold((0, f32::MIN), |acc, (j, &p)| if p > acc.1 { (j, p) } else { acc });
                let conf = (obj[n][k] as f64 * p as f64).clamp(0.0, 1.0);
                if conf < min_confidence {
                    continue;
                }
                let b = &boxes[n][k];
                let bbox = BBox::new(b[0] as f64, b[1] as f64, (b[2] as f64).max(b[0] as f64), (b[3] as f64).max(b[1] as f64))
                    .map_err(|e| DetectorError::Numeric(e.to_string()))?
                    .clamp_to(size, size);
                let mut det = Detection::new(bbox, class, conf).map_err(|e| DetectorError::Numeric(e.to_string()))?;
                if let Some(emb) = &emb {
                    det.embedding = Some(EmbeddingVector(emb[n][k].clone()));
                }
                dets.push(det);
            }
            all.push(dets);
        }
        Ok(all)
    }
}

/// Softmax expectation over bins, `... x 4 x B -> ... x 4`, in bin units.
pub fn expected_distances(box_logits: &Tensor) -> candle_core::Result<Tensor> {
    let b = box_logits.dim(D::Minus1)?;
    // the fused softmax_last_dim kernel has no backward pass
    let probs = candle_nn::ops::softmax(box_logits, D::Minus1)?;
    let bins = Tensor::arange(0u32, b as u32, box_logits.device())?.to_dtype(box_logits.dtype())?;
    probs.broadcast_mul(&bins)?.sum(D::Minus1)
}

pub fn l2_normalize(x: &Tensor) -> candle_core::Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS)?.sqrt()?;
    x.broadcast_div(&norm)
}

/// Scaled cosine similarity of one region and one entry.
pub fn similarity(e: &EmbeddingVector, w: &EmbeddingVector, alpha: f64, beta: f64) -> Result<f64, DetectorError> {
    if e.dim() != w.dim() {
        return Err(DetectorError::Dimension { expected: e.dim(), got: w.dim() });
    }
    let cos = e.cosine(w).ok_or_else(|| DetectorError::Numeric("similarity of a zero vector".into()))?;
    Ok(alpha * cos + beta)
}

/// Resize to `size x size` and scale to `[0, 1]`, channel-first.
pub fn image_to_chw(image: ArrayView3<'_, u8>, size: usize) -> Vec<f32> {
    let resized = resize_image(image, size);
    let mut out = vec![0f32; 3 * size * size];
    for ((y, x, c), &v) in resized.indexed_iter() {
        out[c * size * size + y * size + x] = v as f32 / 255.0;
    }
    out
}

/// Bilinear resize of an `H x W x 3` image.
pub fn resize_image(image: ArrayView3<'_, u8>, size: usize) -> ndarray::Array3<u8> {
    let (h, w, _) = image.dim();
    if h == size && w == size {
        return image.to_owned();
    }
    let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([image[[y as usize, x as usize, 0]], image[[y as usize, x as usize, 1]], image[[y as usize, x as usize, 2]]])
    });
    let r = image::imageops::resize(&rgb, size as u32, size as u32, image::imageops::FilterType::Triangle);
    ndarray::Array3::from_shape_fn((size, size, 3), |(y, x, c)| r.get_pixel(x as u32, y as u32)[c])
}

pub fn batch_tensor(images: &[ArrayView3<'_, u8>], size: usize, device: &Device) -> Result<Tensor, DetectorError> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        data.extend(image_to_chw(*img, size));
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { input_size: 32, widths: [4, 8, 8], context_layers: 1, embed_dim: 8, dfl_bins: 8, token_grid: 2, ..Default::default() }
    }

    #[test]
    fn shapes_and_determinism() {
        let cfg = small();
        let m = Detector::new(&cfg, DType::F32, 3).unwrap();
        let img = Tensor::rand(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let out = m.features(&img).unwrap();
        assert_eq!(out.box_logits.dims(), &[2, 16, 4, 8]);
        assert_eq!(out.embeddings.dims(), &[2, 16, 8]);
        let vocab = Tensor::rand(-1f32, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let s1: Vec<Vec<Vec<f32>>> = m.similarities(&out, &vocab).unwrap().to_vec3().unwrap();
        assert_eq!((s1.len(), s1[0].len(), s1[0][0].len()), (2, 16, 5));
        let s2: Vec<Vec<Vec<f32>>> = m.similarities(&m.features(&img).unwrap(), &vocab).unwrap().to_vec3().unwrap();
        assert_eq!(s1, s2);

        let again = Detector::new(&cfg, DType::F32, 3).unwrap();
        let s3: Vec<Vec<Vec<f32>>> = again.similarities(&again.features(&img).unwrap(), &vocab).unwrap().to_vec3().unwrap();
        assert_eq!(s1, s3);

        let bad = Tensor::rand(-1f32, 1.0, (2, 5, 7), &Device::Cpu).unwrap();
        assert!(matches!(m.similarities(&out, &bad), Err(DetectorError::Dimension { .. })));
    }

    #[test]
    fn decoded_boxes_surround_anchor() {
        let m = Detector::new(&small(), DType::F64, 0).unwrap();
        let img = Tensor::zeros((1, 3, 32, 32), DType::F64, &Device::Cpu).unwrap();
        let out = m.features(&img).unwrap();
        let boxes: Vec<Vec<Vec<f64>>> = m.decode_boxes(&out).unwrap().to_vec3().unwrap();
        let dist: Vec<Vec<Vec<f64>>> = expected_distances(&out.box_logits).unwrap().to_vec3().unwrap();
        for (k, a) in m.anchors().iter().enumerate() {
            let b = &boxes[0][k];
            let d = &dist[0][k];
            assert!((b[0] - (a[0] - 8.0 * d[0])).abs() < 1e-9);
            assert!((b[1] - (a[1] - 8.0 * d[1])).abs() < 1e-9);
            assert!((b[2] - (a[0] + 8.0 * d[2])).abs() < 1e-9);
            assert!((b[3] - (a[1] + 8.0 * d[3])).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_examples() {
        let e = EmbeddingVector(vec![1.0, 2.0, -0.5]);
        assert!((similarity(&e, &e, 1.0, 0.0).unwrap() - 1.0).abs() < 1e-6);
        let a = EmbeddingVector(vec![1.0, 0.0]);
        let b = EmbeddingVector(vec![0.0, 3.0]);
        assert!((similarity(&a, &b, 2.0, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert!(similarity(&a, &EmbeddingVector(vec![0.0, 0.0]), 1.0, 0.0).is_err());
    }
}
