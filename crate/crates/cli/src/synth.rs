//! Synthetic partially annotated corpora on disk.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use ovd_core::curation::io::{write_npy, DatasetDescriptor, VolumeEntry};
use ovd_core::presence::{Presence, PresenceMatrix};
use ovd_core::synthetic::{generate_volume, SceneConfig, SyntheticCatalog};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub datasets: usize,
    pub volumes: usize,
    pub scene: SceneConfig,
    /// Classes each dataset annotates.
    pub annotated: usize,
    /// Classes rendered but left unlabelled in each dataset.
    pub unannotated: usize,
    pub seed: u64,
}

pub struct SynthOutput {
    pub descriptors: Vec<std::path::PathBuf>,
    pub matrix: PresenceMatrix,
}

/// Dataset `i` annotates `annotated` catalogue classes starting at offset
/// `i`, renders the next `unannotated` classes without labels, and never
/// contains the rest. The presence matrix records exactly that.
pub fn write_corpus(out: &Path, opts: &SynthOptions) -> Result<SynthOutput> {
    let catalog = SyntheticCatalog::default();
    let n = catalog.classes().len();
    ensure!(opts.annotated >= 1 && opts.annotated + opts.unannotated <= n, "annotated + unannotated must be between 1 and {n}");
    let names = catalog.names();
    let dataset_ids: Vec<String> = (0..opts.datasets).map(|i| format!("synth_{}", (b'a' + i as u8) as char)).collect();
    let mut matrix = PresenceMatrix::filled(dataset_ids.clone(), names.clone(), Presence::Impossible)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut descriptors = Vec::new();
    for (i, id) in dataset_ids.iter().enumerate() {
        let dir = out.join(id);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let annotated: BTreeSet<usize> = (0..opts.annotated).map(|k| (i + k) % n).collect();
        let hidden: BTreeSet<usize> = (opts.annotated..opts.annotated + opts.unannotated).map(|k| (i + k) % n).collect();
        for &c in &annotated {
            matrix.set(id, &names[c], Presence::Annotated)?;
        }
        for &c in &hidden {
            matrix.set(id, &names[c], Presence::Unannotated)?;
        }
        let allowed: Vec<usize> = annotated.union(&hidden).copied().collect();
        let mut volumes = Vec::new();
        for v in 0..opts.volumes {
            let volume_id = format!("{id}_v{v:03}");
            let mut vol = generate_volume(&catalog, &opts.scene, &allowed, &volume_id, id, &mut rng);
            vol.labels.mapv_inplace(|l| if l > 0 && annotated.contains(&(l as usize - 1)) { l } else { 0 });
            let (image, labels) = (format!("{volume_id}_image.npy"), format!("{volume_id}_labels.npy"));
            write_npy(&dir.join(&image), &vol.image)?;
            write_npy(&dir.join(&labels), &vol.labels)?;
            volumes.push(VolumeEntry {
                volume_id,
                image: image.into(),
                labels: labels.into(),
                modality: vol.modality,
                label_names: vol.label_names,
            });
        }
        let path = dir.join("dataset.json");
        DatasetDescriptor { dataset_id: id.clone(), volumes }.save(&path)?;
        descriptors.push(path);
    }
    Ok(SynthOutput { descriptors, matrix })
}
