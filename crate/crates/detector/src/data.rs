//! Sample preparation and synthetic corpora for experiments.

use ovd_core::curation::{slice_volume, SliceSample};
use ovd_core::geometry::{BBox, GroundTruthBox};
use ovd_core::synthetic::{generate_volume, SceneConfig, SyntheticCatalog};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::resize_image;

/// Resize a sample to the network input and scale its boxes to match.
pub fn prepare(sample: &SliceSample, size: usize) -> SliceSample {
    let (h, w) = (sample.height(), sample.width());
    if h == size && w == size {
        return sample.clone();
    }
    let (sx, sy) = (size as f64 / w as f64, size as f64 / h as f64);
    let scale = |b: &BBox| BBox { x_min: b.x_min * sx, y_min: b.y_min * sy, x_max: b.x_max * sx, y_max: b.y_max * sy };
    SliceSample {
        image: resize_image(sample.image.view(), size),
        annotations: sample.annotations.iter().map(|g| GroundTruthBox { bbox: scale(&g.bbox), ..g.clone() }).collect(),
        ..sample.clone()
    }
}

/// Synthetic 2-D images drawn from the first `classes` catalogue classes.
pub fn synthetic_samples(catalog: &SyntheticCatalog, classes: usize, images: usize, scene: &SceneConfig, dataset_id: &str, seed: u64) -> Vec<SliceSample> {
    let allowed: Vec<usize> = (0..classes.min(catalog.classes().len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = SceneConfig { depth: 1, ..scene.clone() };
    (0..images)
        .flat_map(|i| {
            let vol = generate_volume(catalog, &scene, &allowed, format!("{dataset_id}_{i:04}"), dataset_id, &mut rng);
            slice_volume(&vol).expect("synthetic volumes are well formed")
        })
        .collect()
}

/// Delete `fraction` of the boxes of `class`, chosen uniformly with `seed`.
/// Returns how many were removed.
pub fn drop_boxes(samples: &mut [SliceSample], class: &str, fraction: f64, seed: u64) -> usize {
    let slots: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.annotations.iter().enumerate().filter(|(_, g)| g.class_name == class).map(move |(j, _)| (i, j)))
        .collect();
    let n = ((slots.len() as f64) * fraction).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<(usize, usize)> = rand::seq::index::sample(&mut rng, slots.len(), n).into_iter().map(|k| slots[k]).collect();
    // remove from the back so indices stay valid
    chosen.sort_unstable_by(|a, b| b.cmp(a));
    for (i, j) in &chosen {
        samples[*i].annotations.remove(*j);
    }
    n
}
