//! Procedural CT-like scenes of geometric "organs".
//!
//! Each catalogue class has its own shape and Hounsfield level, so scenes
//! are separable by a small network yet go through exactly the same
//! curation path (windowing, slicing, mask-to-box) as real segmentation data.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curation::{normalize_intensities, to_three_channel, Modality, VolumeRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
    Ring,
    Diamond,
    Cross,
}

impl ShapeKind {
    /// Whether `(dx, dy)`, in units of the half-extents, lies inside the shape.
    pub fn contains(self, dx: f64, dy: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
            ShapeKind::Rectangle => ax <= 1.0 && ay <= 1.0,
            ShapeKind::Triangle => (-1.0..=1.0).contains(&dy) && ax <= (dy + 1.0) / 2.0,
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.55 * 0.55..=1.0).contains(&r2)
            }
            ShapeKind::Diamond => ax + ay <= 1.0,
            ShapeKind::Cross => (ax <= 1.0 && ay <= 0.34) || (ax <= 0.34 && ay <= 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganClass {
    pub name: String,
    pub shape: ShapeKind,
    /// Mean intensity in Hounsfield units.
    pub hu: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCatalog {
    classes: Vec<OrganClass>,
}

impl Default for SyntheticCatalog {
    fn default() -> Self {
        let c = |name: &str, shape, hu| OrganClass { name: name.to_string(), shape, hu };
        Self {
            classes: vec![
                c("liver", ShapeKind::Ellipse, 250.0),
                c("kidney", ShapeKind::Ring, 500.0),
                c("spleen", ShapeKind::Rectangle, 0.0),
                c("tumor", ShapeKind::Diamond, -250.0),
                c("pancreas", ShapeKind::Triangle, 750.0),
                c("aorta", ShapeKind::Cross, 950.0),
            ],
        }
    }
}

impl SyntheticCatalog {
    pub fn new(classes: Vec<OrganClass>) -> Self {
        Self { classes }
    }

    pub fn classes(&self) -> &[OrganClass] {
        &self.classes
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Catalogue restricted to the first `n` classes.
    pub fn truncated(&self, n: usize) -> Self {
        Self { classes: self.classes[..n.min(self.classes.len())].to_vec() }
    }

    /// 8-bit value a class's mean intensity maps to under CT windowing.
    pub fn display_intensity(&self, class: &OrganClass) -> u8 {
        let hu = (class.hu as f64).clamp(-500.0, 1000.0);
        ((hu + 500.0) / 1500.0 * 255.0).round() as u8
    }

    /// Label map used by generated volumes: catalogue index + 1.
    pub fn label_names(&self) -> BTreeMap<u32, String> {
        self.classes.iter().enumerate().map(|(i, c)| (i as u32 + 1, c.name.clone())).collect()
    }

    /// One object of class `class` filling a `size x size` patch, windowed
    /// and replicated to three channels.
    pub fn render_single<R: Rng>(&self, class: usize, size: usize, cfg: &SceneConfig, rng: &mut R) -> Array3<u8> {
        let mut hu = Array2::from_elem((size, size), cfg.background_hu);
        let mut labels = Array2::<u32>::zeros((size, size));
        let half = size as f64 / 2.0;
        let obj = PlacedObject { class, cx: half, cy: half, rx: half * 0.8, ry: half * 0.8, rz: 1.0, cz: 0.0 };
        paint(&mut hu, &mut labels, &obj, 0.0, self, cfg, rng);
        let norm = normalize_intensities(hu.into_dyn().view(), Modality::CT).expect("non-empty patch");
        to_three_channel(norm.view()).expect("2-D patch")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub size: usize,
    /// Number of slices; 1 produces 2-D images.
    pub depth: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Full extent of an object along each axis, in pixels.
    pub min_extent: f64,
    pub max_extent: f64,
    pub background_hu: f32,
    pub noise_hu: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 160,
            depth: 1,
            min_objects: 1,
            max_objects: 3,
            min_extent: 20.0,
            max_extent: 56.0,
            background_hu: -1000.0,
            noise_hu: 25.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PlacedObject {
    class: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cz: f64,
    rz: f64,
}

fn paint<R: Rng>(
    hu: &mut Array2<f32>,
    labels: &mut Array2<u32>,
    obj: &PlacedObject,
    z: f64,
    catalog: &SyntheticCatalog,
    cfg: &SceneConfig,
    rng: &mut R,
) {
    // ellipsoidal taper along the slice axis
    let dz = (z - obj.cz) / obj.rz;
    if dz.abs() >= 1.0 {
        return;
    }
    let taper = (1.0 - dz * dz).sqrt();
    if taper < 0.3 {
        return;
    }
    let (rx, ry) = (obj.rx * taper, obj.ry * taper);
    let class = &catalog.classes[obj.class];
    let noise = Normal::new(0.0f32, cfg.noise_hu.max(1e-6)).expect("finite std");
    let (h, w) = hu.dim();
    let y0 = (obj.cy - ry).floor().max(0.0) as usize;
    let y1 = ((obj.cy + ry).ceil() as usize).min(h.saturating_sub(1));
    let x0 = (obj.cx - rx).floor().max(0.0) as usize;
    let x1 = ((obj.cx + rx).ceil() as usize).min(w.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 + 0.5 - obj.cx) / rx;
            let dy = (y as f64 + 0.5 - obj.cy) / ry;
            if class.shape.contains(dx, dy) {
                hu[[y, x]] = class.hu + noise.sample(rng);
                labels[[y, x]] = obj.class as u32 + 1;
            }
        }
    }
}

/// Draw one volume (or 2-D image when `cfg.depth == 1`) containing objects
/// of the `allowed` catalogue classes.
pub fn generate_volume<R: Rng>(
    catalog: &SyntheticCatalog,
    cfg: &SceneConfig,
    allowed: &[usize],
    volume_id: impl Into<String>,
    dataset_id: impl Into<String>,
    rng: &mut R,
) -> VolumeRecord {
    let n = cfg.size;
    let depth = cfg.depth.max(1);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let mut placed: Vec<PlacedObject> = Vec::new();
    'objects: for _ in 0..count {
        for _attempt in 0..50 {
            let ex = rng.random_range(cfg.min_extent..=cfg.max_extent);
            let ey = (ex * rng.random_range(0.75..=1.25)).clamp(cfg.min_extent, cfg.max_extent);
            let (rx, ry) = (ex / 2.0, ey / 2.0);
            let cx = rng.random_range(rx + 1.0..=n as f64 - rx - 1.0);
            let cy = rng.random_range(ry + 1.0..=n as f64 - ry - 1.0);
            let clear = placed.iter().all(|p| {
                (cx - p.cx).abs() > rx + p.rx + 3.0 || (cy - p.cy).abs() > ry + p.ry + 3.0
            });
            if clear {
                let class = allowed[rng.random_range(0..allowed.len())];
                let (cz, rz) = if depth == 1 {
                    (0.0, 1.0)
                } else {
                    let rz = rng.random_range(depth as f64 * 0.3..=depth as f64 * 0.6);
                    (rng.random_range(0.0..depth as f64), rz)
                };
                placed.push(PlacedObject { class, cx, cy, rx, ry, cz, rz });
                continue 'objects;
            }
        }
    }

    let bg = Normal::new(cfg.background_hu, cfg.noise_hu.max(1e-6)).expect("finite std");
    let mut image = ArrayD::<f32>::zeros(IxDyn(&[depth, n, n]));
    let mut label_data = ArrayD::<u32>::zeros(IxDyn(&[depth, n, n]));
    for z in 0..depth {
        let mut hu = Array2::from_shape_fn((n, n), |_| bg.sample(rng));
        let mut labels = Array2::<u32>::zeros((n, n));
        for obj in &placed {
            paint(&mut hu, &mut labels, obj, z as f64, catalog, cfg, rng);
        }
        image.index_axis_mut(ndarray::Axis(0), z).assign(&hu);
        label_data.index_axis_mut(ndarray::Axis(0), z).assign(&labels);
    }
    if depth == 1 {
        image = image.index_axis_move(ndarray::Axis(0), 0);
        label_data = label_data.index_axis_move(ndarray::Axis(0), 0);
    }
    VolumeRecord {
        volume_id: volume_id.into(),
        dataset_id: dataset_id.into(),
        modality: Modality::CT,
        image,
        labels: label_data,
        label_names: catalog.label_names(),
    }
}
