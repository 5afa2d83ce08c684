#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use ovd_core::curation::SliceSample;
use ovd_core::encoder::{AlignedMockEncoder, FoundationEncoder};
use ovd_core::geometry::BBox;
use ovd_core::presence::{Presence, PresenceMatrix};
use ovd_core::synthetic::{SceneConfig, SyntheticCatalog};
use ovd_core::vocabulary::build_vocabulary;
use ovd_detector::config::IouKind;
use ovd_detector::data::synthetic_samples;
use ovd_detector::loss::{contrastive_loss, detection_loss, dfl_loss, iou_loss, objectness_loss, total_loss, ImageTargets};
use ovd_detector::model::{batch_tensor, Detector};
use ovd_detector::train::{training_rng, Trainer};
use ovd_detector::{LossConfig, ModelConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub const FD_STEP: f64 = 1e-6;

/// Largest relative error between autograd and central differences of the
/// scalar `f` over every coordinate of `x`.
pub fn check_input_gradient(x: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_vec(x.to_vec(), shape, &Device::Cpu).unwrap();
    let y = f(var.as_tensor());
    let grads = y.backward().unwrap();
    let g: Vec<f64> = grads.get(var.as_tensor()).map(|g| g.flatten_all().unwrap().to_vec1().unwrap()).unwrap_or(vec![0.0; x.len()]);
    let eval = |v: Vec<f64>| -> f64 { f(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap() };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let (mut up, mut down) = (x.to_vec(), x.to_vec());
        up[i] += FD_STEP;
        down[i] -= FD_STEP;
        let fd = (eval(up) - eval(down)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(g[i], fd));
    }
    worst
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

/// Random corner boxes with positive extent.
pub fn random_boxes(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m)
        .flat_map(|_| {
            let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
            let (w, h) = (rng.random_range(5.0..30.0), rng.random_range(5.0..30.0));
            [x, y, x + w, y + h]
        })
        .collect()
}

pub fn contrastive_grad_error(seed: u64, m: usize, v: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sims = normals(&mut rng, m * v, 3.0);
    let targets: Vec<u32> = (0..m).map(|_| rng.random_range(0..v as u32)).collect();
    let obj = normals(&mut rng, m, 2.0);
    let obj_t: Vec<f64> = (0..m).map(|i| (i % 2) as f64).collect();
    let ce = check_input_gradient(&sims, &[m, v], |s| contrastive_loss(s, &targets).unwrap().unwrap());
    let bce = check_input_gradient(&obj, &[m], |o| objectness_loss(o, &obj_t, 2.0, 3.0).unwrap());
    ce.max(bce)
}

pub fn iou_grad_error(seed: u64, m: usize, kind: IouKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = random_boxes(&mut rng, m);
    let target = Tensor::from_vec(random_boxes(&mut rng, m), (m, 4), &Device::Cpu).unwrap();
    let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
    check_input_gradient(&pred, &[m, 4], |p| iou_loss(p, &target, &weights, kind).unwrap())
}

pub fn dfl_grad_error(seed: u64, m: usize, bins: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = normals(&mut rng, m * 4 * bins, 2.0);
    let mut targets: Vec<[f64; 4]> = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(0.1..bins as f64 - 1.1))).collect();
    // one target beyond the last bin exercises the clamp
    targets[0][2] = bins as f64 + 0.5;
    let weights = vec![1.0; m];
    check_input_gradient(&logits, &[m, 4, bins], |l| dfl_loss(l, &targets, &weights).unwrap().0)
}

/// Gradient of the combined loss with respect to similarities, predicted
/// boxes and box logits at once.
pub fn total_grad_error(seed: u64, m: usize, v: usize, bins: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sims = normals(&mut rng, m * v, 3.0);
    let pred = random_boxes(&mut rng, m);
    let logits = normals(&mut rng, m * 4 * bins, 2.0);
    let (ns, np) = (sims.len(), pred.len());
    let targets: Vec<u32> = (0..m).map(|_| rng.random_range(0..v as u32)).collect();
    let target_boxes = Tensor::from_vec(random_boxes(&mut rng, m), (m, 4), &Device::Cpu).unwrap();
    let dfl_targets: Vec<[f64; 4]> = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(0.1..bins as f64 - 1.1))).collect();
    let ones = vec![1.0; m];
    let cfg = LossConfig { iou_weight: 7.5, dfl_weight: 1.5, contrastive_weight: 0.5, ..Default::default() };
    let all: Vec<f64> = sims.iter().chain(&pred).chain(&logits).copied().collect();
    check_input_gradient(&all, &[all.len()], |x| {
        let s = x.narrow(0, 0, ns).unwrap().reshape((m, v)).unwrap();
        let p = x.narrow(0, ns, np).unwrap().reshape((m, 4)).unwrap();
        let l = x.narrow(0, ns + np, m * 4 * bins).unwrap().reshape((m, 4, bins)).unwrap();
        let con = contrastive_loss(&s, &targets).unwrap().unwrap();
        let iou = iou_loss(&p, &target_boxes, &ones, IouKind::Ciou).unwrap();
        let dfl = dfl_loss(&l, &dfl_targets, &ones).unwrap().0;
        total_loss(&con, &iou, &dfl, 1.0, &cfg).unwrap()
    })
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig { input_size: 32, widths: [4, 4, 8], context_layers: 1, embed_dim: 8, dfl_bins: 8, token_grid: 2, alpha_init: 4.0, ..Default::default() }
}

/// Gradient of the full detection loss with respect to `samples` randomly
/// chosen parameters of a tiny double-precision model.
pub fn model_grad_error(seed: u64, samples: usize) -> f64 {
    let cfg = tiny_model_config();
    let model = Detector::new(&cfg, DType::F64, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // move the zero-initialised gate so the attention path carries gradient
    for (name, var) in model.varmap().data().lock().unwrap().iter() {
        if name == "fusion.gate" {
            var.set(&Tensor::new(&[0.7f64], &Device::Cpu).unwrap()).unwrap();
        }
    }
    let images = Tensor::from_vec(normals(&mut rng, 2 * 3 * 32 * 32, 0.5).iter().map(|x| x + 0.5).collect::<Vec<_>>(), (2, 3, 32, 32), &Device::Cpu).unwrap();
    let v = 4;
    let vocab = Tensor::from_vec(normals(&mut rng, 2 * v * cfg.embed_dim, 1.0), (2, v, cfg.embed_dim), &Device::Cpu).unwrap();
    let targets = vec![
        ImageTargets { boxes: vec![BBox::new(2.0, 3.0, 18.0, 14.0).unwrap(), BBox::new(17.0, 15.0, 30.0, 31.0).unwrap()], entries: vec![1, 3], box_supervision: true },
        ImageTargets { boxes: vec![BBox::new(6.0, 6.0, 26.0, 24.0).unwrap()], entries: vec![0], box_supervision: true },
    ];
    let loss_cfg = LossConfig { center_radius: 2.5, ..Default::default() };
    let loss = || {
        let out = model.features(&images).unwrap();
        let sims = model.similarities(&out, &vocab).unwrap();
        detection_loss(&model, &out, &sims, &targets, &loss_cfg).unwrap().0
    };
    let grads = loss().backward().unwrap();
    let data = model.varmap().data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let var = &data[names[rng.random_range(0..names.len())]];
        let n = var.elem_count();
        let i = rng.random_range(0..n);
        let original: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
        let g: f64 = grads.get(var.as_tensor()).map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[i]).unwrap_or(0.0);
        let at = |delta: f64| {
            let mut v = original.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
            loss().to_scalar::<f64>().unwrap()
        };
        let fd = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        var.set(&Tensor::from_vec(original, var.shape(), &Device::Cpu).unwrap()).unwrap();
        worst = worst.max(rel_err(g, fd));
    }
    worst
}


/// Small network on 64 pixel inputs, fast enough for unit-scale training.
pub fn small_model_config() -> ModelConfig {
    ModelConfig { input_size: 64, widths: [8, 16, 16], context_layers: 1, embed_dim: 16, dfl_bins: 8, token_grid: 2, ..Default::default() }
}

pub fn small_scene() -> SceneConfig {
    SceneConfig { size: 64, min_extent: 12.0, max_extent: 26.0, max_objects: 2, ..Default::default() }
}

pub fn small_samples(images: usize, seed: u64) -> Vec<SliceSample> {
    synthetic_samples(&SyntheticCatalog::default(), 4, images, &small_scene(), "toy", seed)
}

pub fn small_train_config() -> TrainConfig {
    TrainConfig {
        model: small_model_config(),
        batch_size: 4,
        vocab_size: 6,
        learning_rate: 5e-3,
        epochs: 2,
        ..Default::default()
    }
}

pub fn aligned_encoder(dim: usize) -> AlignedMockEncoder {
    AlignedMockEncoder::new(&SyntheticCatalog::default(), dim, 0)
}

/// Matrix over the default catalogue for one dataset, every class `fill`.
pub fn catalogue_matrix(dataset: &str, fill: Presence) -> PresenceMatrix {
    PresenceMatrix::filled(vec![dataset.to_string()], SyntheticCatalog::default().names(), fill).unwrap()
}

pub fn trainer(cfg: &TrainConfig, pseudo: bool, seed: u64) -> Trainer {
    let mut cfg = cfg.clone();
    cfg.pseudo_labeling = pseudo;
    let model = Detector::new(&cfg.model, DType::F32, seed).unwrap();
    let pool = SyntheticCatalog::default().names();
    let matrix = Some(catalogue_matrix("toy", Presence::Annotated));
    Trainer::new(model, cfg.clone(), Box::new(aligned_encoder(cfg.model.embed_dim)), matrix, pool).unwrap()
}

/// Single forward pass on the original annotations, written out step by
/// step with the same vocabulary stream the trainer uses.
pub fn reference_loss(cfg: &TrainConfig, seed: u64, batch: &[&SliceSample]) -> f32 {
    let model = Detector::new(&cfg.model, DType::F32, seed).unwrap();
    let encoder = aligned_encoder(cfg.model.embed_dim);
    let pool = SyntheticCatalog::default().names();
    let mut rng = training_rng(cfg.seed);
    let mut vocabs = Vec::new();
    for s in batch {
        let positives: Vec<String> = s.classes().into_iter().collect();
        let mut v = build_vocabulary(&positives, &pool, cfg.vocab_size, &mut rng).unwrap().vocabulary;
        v.encode_labels(&encoder as &dyn FoundationEncoder, &cfg.prompt).unwrap();
        vocabs.push(v);
    }
    let images = batch_tensor(&batch.iter().map(|s| s.image.view()).collect::<Vec<_>>(), cfg.model.input_size, model.device()).unwrap();
    let out = model.features(&images).unwrap();
    let emb: Vec<_> = vocabs.iter().map(|v| v.embeddings().unwrap()).collect();
    let sims = model.similarities(&out, &model.vocabulary_tensor(&emb).unwrap()).unwrap();
    let targets: Vec<ImageTargets> = batch
        .iter()
        .zip(&vocabs)
        .map(|(s, v)| ImageTargets {
            boxes: s.annotations.iter().map(|g| g.bbox).collect(),
            entries: s.annotations.iter().map(|g| v.position(&g.class_name).unwrap()).collect(),
            box_supervision: true,
        })
        .collect();
    detection_loss(&model, &out, &sims, &targets, &cfg.loss).unwrap().0.to_scalar::<f32>().unwrap()
}
