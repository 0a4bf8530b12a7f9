//! Dataset resolution shared by training and evaluation: synth generation
//! or manifest loading, per-scene capping, mask-size filtering, splitting,
//! and optional discrepancy-channel attachment.

use super::config::{ExperimentConfig, ProviderKind};
use super::{PipeResult, PipelineError};
use crate::datamodel::{
    downsample_image, downsample_mask, filter_by_anomaly_pixels, generate_synthetic_dataset,
    load_manifest, load_samples, split_dataset, DatasetSplits, ImageSample, Split,
};
use crate::discrepancy::{
    attach_fourth_channel, DiscrepancyProvider, FileDiscrepancyProvider,
    OracleDiscrepancyProvider,
};
use rayon::prelude::*;
use std::collections::BTreeMap;

pub(crate) fn make_provider(config: &ExperimentConfig) -> Box<dyn DiscrepancyProvider> {
    match config.discrepancy.provider {
        ProviderKind::Oracle => Box::new(OracleDiscrepancyProvider {
            noise_level: config.discrepancy.noise_level,
            seed: config.seeds.data,
        }),
        ProviderKind::File => Box::new(FileDiscrepancyProvider {
            dir: config.discrepancy.dir.clone(),
        }),
    }
}

fn cap_per_dataset(samples: Vec<ImageSample>, cap: usize) -> Vec<ImageSample> {
    if cap == 0 {
        return samples;
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    samples
        .into_iter()
        .filter(|s| {
            let n = seen.entry(s.dataset.clone()).or_insert(0);
            *n += 1;
            *n <= cap
        })
        .collect()
}

/// Loads and splits the configured dataset (the config must be normalized).
///
/// Manifest entries that all carry explicit split tags keep them; otherwise
/// everything is re-split by the configured weights and data seed. With the
/// discrepancy switch on, every sample gets its fourth channel attached.
pub(crate) fn prepare_data(config: &ExperimentConfig) -> PipeResult<DatasetSplits> {
    let (samples, all_tagged) = match &config.data.manifest {
        Some(path) => {
            let manifest = load_manifest(path)?;
            let tagged = !manifest.entries.is_empty()
                && manifest.entries.iter().all(|e| e.split.is_some());
            let mut samples = load_samples(&manifest)?;
            samples = cap_per_dataset(samples, config.data.filter.per_scene_cap);
            (samples, tagged)
        }
        None => {
            let synth = &config.data.synth;
            (
                generate_synthetic_dataset(&synth.scene, synth.n_normal, synth.n_anomaly)?,
                false,
            )
        }
    };
    // the pixel filter applies at source resolution, then everything is
    // brought to the configured training size
    let samples = filter_by_anomaly_pixels(samples, config.data.filter.min_anomaly_pixels)?;
    let target = config.vae.image_size;
    let samples: Vec<ImageSample> = samples
        .into_iter()
        .map(|s| {
            if s.height() == target && s.width() == target {
                return Ok(s);
            }
            let pixels = downsample_image(&s.pixels, (target, target))?;
            let mask = s
                .anomaly_mask
                .as_ref()
                .map(|m| downsample_mask(m, (target, target)))
                .transpose()?;
            ImageSample::new(s.id, pixels, s.label, mask, s.split, s.dataset)
        })
        .collect::<Result<_, _>>()?;
    if samples.is_empty() {
        return Err(PipelineError::Data2(
            "no samples left after filtering".into(),
        ));
    }

    let mut splits = if all_tagged {
        let mut out = DatasetSplits::default();
        for s in samples {
            match s.split {
                Split::Train => out.train.push(s),
                Split::Val => out.val.push(s),
                Split::Test => out.test.push(s),
            }
        }
        out
    } else {
        split_dataset(samples, &config.split_spec()?)?
    };

    if config.ablation.use_discrepancy {
        let provider = make_provider(config);
        let attach_all = |set: &mut Vec<ImageSample>| -> PipeResult<()> {
            let replaced: Vec<PipeResult<ImageSample>> = set
                .par_iter()
                .map(|s| {
                    let d = provider.discrepancy_for(s)?;
                    Ok(attach_fourth_channel(s, &d)?)
                })
                .collect();
            let mut out = Vec::with_capacity(replaced.len());
            for r in replaced {
                out.push(r?);
            }
            *set = out;
            Ok(())
        };
        attach_all(&mut splits.train)?;
        attach_all(&mut splits.val)?;
        attach_all(&mut splits.test)?;
    }
    Ok(splits)
}
