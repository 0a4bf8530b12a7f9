//! Dataset generation: renders the configured synthetic scenes to PNGs and
//! writes their manifest.

use super::config::{config_hash, ExperimentConfig};
use super::{PipeResult, PipelineError};
use crate::datamodel::{
    generate_synthetic_scenes, write_image_png, write_manifest, write_mask_png, Label,
    ManifestEntry,
};
use std::path::PathBuf;

pub struct GenerateOutcome {
    pub dataset_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub n_normal: usize,
    pub n_anomaly: usize,
}

/// Renders the synthetic dataset into `<out>/<hash>/dataset/` with
/// `images/` and `masks/` subdirectories plus `manifest.jsonl`.
/// Deterministic for a given config.
pub fn cmd_generate(config: &ExperimentConfig) -> PipeResult<GenerateOutcome> {
    let config = config.normalized()?;
    if config.data.manifest.is_some() {
        return Err(PipelineError::Config(
            "generate requires synthetic data config, not a manifest".into(),
        ));
    }
    let hash = config_hash(&config)?;
    let dataset_dir = config.output_dir.join(&hash).join("dataset");
    let images_dir = dataset_dir.join("images");
    let masks_dir = dataset_dir.join("masks");
    for d in [&dataset_dir, &images_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(|e| PipelineError::Io {
            path: d.clone(),
            source: e,
        })?;
    }

    let synth = &config.data.synth;
    let scenes = generate_synthetic_scenes(&synth.scene, synth.n_normal, synth.n_anomaly)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let s = &scene.sample;
        let image_rel = PathBuf::from("images").join(format!("{}.png", s.id));
        write_image_png(&dataset_dir.join(&image_rel), &s.pixels)?;
        let mask_rel = s.anomaly_mask.as_ref().map(|mask| {
            let rel = PathBuf::from("masks").join(format!("{}.png", s.id));
            (rel, mask)
        });
        let mask = match mask_rel {
            Some((rel, mask)) => {
                write_mask_png(&dataset_dir.join(&rel), mask)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            image: image_rel,
            mask,
            label: s.label,
            dataset: s.dataset.clone(),
            split: None,
        });
    }
    let manifest_path = dataset_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &entries)?;
    Ok(GenerateOutcome {
        dataset_dir,
        manifest_path,
        n_normal: entries.iter().filter(|e| e.label == Label::Normal).count(),
        n_anomaly: entries.iter().filter(|e| e.label == Label::Anomaly).count(),
    })
}
