//! Synthetic-anomaly creation by semantic label replacement, discrepancy
//! map provisioning, score statistics, and fourth-channel attachment.
//!
//! The label replacement operates on semantic maps: a number of object
//! instances are selected and each gets a new class. The frequency-based
//! mode samples the replacement class proportional to its pixel frequency
//! in normal data, so rare classes are not over-represented as synthetic
//! anomalies; the uniform mode is the random-class baseline.

use crate::datamodel::{
    connected_components, ClassFrequencyTable, DataError, ImageSample, Label,
};
use crate::seeding;
use ndarray::{Array2, Array3, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub type DiscResult<T> = Result<T, DiscrepancyError>;

#[derive(Debug, Error)]
pub enum DiscrepancyError {
    #[error("label map pixel {value} at {pos:?} not in vocabulary")]
    PixelOutsideVocabulary { value: u32, pos: (usize, usize) },
    #[error("requested {requested} replacements but only {available} eligible instances")]
    TooFewInstances { requested: usize, available: usize },
    #[error("no replacement class available for class {0} (all weights zero)")]
    NoReplacementClass(u32),
    #[error("anomaly sample {0} has no mask")]
    MissingMask(String),
    #[error("scores must be in [0, 1], found {0}")]
    ScoreOutOfRange(f64),
    #[error("empty score list")]
    EmptyScores,
    #[error("sample {id}: {msg}")]
    BadSample { id: String, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A semantic segmentation map with its class vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    classes: Array2<u32>,
    vocabulary: BTreeSet<u32>,
}

impl LabelMap {
    /// Validates that every pixel's class is in the vocabulary.
    pub fn new(classes: Array2<u32>, vocabulary: BTreeSet<u32>) -> DiscResult<Self> {
        for ((y, x), &v) in classes.indexed_iter() {
            if !vocabulary.contains(&v) {
                return Err(DiscrepancyError::PixelOutsideVocabulary {
                    value: v,
                    pos: (y, x),
                });
            }
        }
        Ok(Self {
            classes,
            vocabulary,
        })
    }

    /// Builds the vocabulary from the distinct values present.
    pub fn from_classes(classes: Array2<u32>) -> Self {
        let vocabulary = classes.iter().copied().collect();
        Self {
            classes,
            vocabulary,
        }
    }

    pub fn classes(&self) -> &Array2<u32> {
        &self.classes
    }

    pub fn vocabulary(&self) -> &BTreeSet<u32> {
        &self.vocabulary
    }
}

/// Record of one replacement pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementPlan {
    /// (instance id, original class, replacement class); the replacement
    /// always differs from the original.
    pub entries: Vec<(usize, u32, u32)>,
    pub seed: u64,
}

/// Which counts the frequency-based sampler weights by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyBasis {
    #[default]
    Pixels,
    Instances,
}

/// Knobs for instance selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementOptions {
    /// Components smaller than this are not eligible for replacement.
    pub min_instance_area: usize,
    pub basis: FrequencyBasis,
}

impl Default for ReplacementOptions {
    fn default() -> Self {
        Self {
            min_instance_area: 16,
            basis: FrequencyBasis::Pixels,
        }
    }
}

enum ReplacementMode<'a> {
    Frequency(&'a ClassFrequencyTable, FrequencyBasis),
    Uniform,
}

fn replace_labels(
    map: &LabelMap,
    mode: ReplacementMode<'_>,
    n_objects: usize,
    seed: u64,
    min_instance_area: usize,
) -> DiscResult<(LabelMap, ReplacementPlan)> {
    let components = connected_components(&map.classes);
    let eligible: Vec<(usize, &crate::datamodel::Component)> = components
        .iter()
        .enumerate()
        .filter(|(_, c)| c.area() >= min_instance_area)
        .collect();
    if n_objects > eligible.len() {
        return Err(DiscrepancyError::TooFewInstances {
            requested: n_objects,
            available: eligible.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, eligible.len(), n_objects);
    let mut classes = map.classes.clone();
    let mut entries = Vec::with_capacity(n_objects);
    for pick in chosen.iter() {
        let (instance_id, comp) = eligible[pick];
        let original = comp.class;
        let candidates: Vec<u32> = map
            .vocabulary
            .iter()
            .copied()
            .filter(|&c| c != original)
            .collect();
        let weights: Vec<f64> = candidates
            .iter()
            .map(|&c| match &mode {
                ReplacementMode::Uniform => 1.0,
                ReplacementMode::Frequency(freqs, basis) => match basis {
                    FrequencyBasis::Pixels => freqs.pixel_count(c) as f64,
                    FrequencyBasis::Instances => freqs.instance_count(c) as f64,
                },
            })
            .collect();
        if candidates.is_empty() || weights.iter().sum::<f64>() <= 0.0 {
            return Err(DiscrepancyError::NoReplacementClass(original));
        }
        let dist = WeightedIndex::new(&weights)
            .map_err(|_| DiscrepancyError::NoReplacementClass(original))?;
        let replacement = candidates[dist.sample(&mut rng)];
        for &(y, x) in &comp.pixels {
            classes[[y, x]] = replacement;
        }
        entries.push((instance_id, original, replacement));
    }
    let new_map = LabelMap {
        classes,
        vocabulary: map.vocabulary.clone(),
    };
    Ok((new_map, ReplacementPlan { entries, seed }))
}

/// Replaces `n_objects` uniformly-chosen instances, drawing each
/// replacement class with probability proportional to its normal-data
/// frequency (excluding the instance's own class, renormalized).
pub fn frequency_based_label_replacement(
    map: &LabelMap,
    freqs: &ClassFrequencyTable,
    n_objects: usize,
    seed: u64,
    options: ReplacementOptions,
) -> DiscResult<(LabelMap, ReplacementPlan)> {
    replace_labels(
        map,
        ReplacementMode::Frequency(freqs, options.basis),
        n_objects,
        seed,
        options.min_instance_area,
    )
}

/// The random-class baseline: replacement classes drawn uniformly over the
/// vocabulary minus the instance's own class.
pub fn random_label_replacement(
    map: &LabelMap,
    n_objects: usize,
    seed: u64,
    options: ReplacementOptions,
) -> DiscResult<(LabelMap, ReplacementPlan)> {
    replace_labels(
        map,
        ReplacementMode::Uniform,
        n_objects,
        seed,
        options.min_instance_area,
    )
}

/// A per-pixel anomaly score map; 0 is normal, 1 anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyImage {
    scores: Array2<f64>,
}

impl DiscrepancyImage {
    pub fn new(scores: Array2<f64>) -> DiscResult<Self> {
        for &v in scores.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(DiscrepancyError::ScoreOutOfRange(v));
            }
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn dim(&self) -> (usize, usize) {
        self.scores.dim()
    }
}

/// 3×3 binomial blur with zero padding, applied twice.
fn small_blur(mask: &Array2<f64>) -> Array2<f64> {
    let kernel = [0.25, 0.5, 0.25];
    let pass = |src: &Array2<f64>, horizontal: bool| {
        let (h, w) = src.dim();
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let off = ki as isize - 1;
                    let (yy, xx) = if horizontal {
                        (y as isize, x as isize + off)
                    } else {
                        (y as isize + off, x as isize)
                    };
                    if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                        acc += kv * src[[yy as usize, xx as usize]];
                    }
                }
                out[[y, x]] = acc;
            }
        }
        out
    };
    let once = pass(&pass(mask, true), false);
    pass(&pass(&once, true), false)
}

/// Stand-in for a learned discrepancy network: the anomaly mask smoothed by
/// a small blur, plus clipped Gaussian noise of the given level. Normal
/// samples produce a pure noise floor.
pub fn oracle_discrepancy(
    sample: &ImageSample,
    noise_level: f64,
    seed: u64,
) -> DiscResult<DiscrepancyImage> {
    let (h, w) = (sample.height(), sample.width());
    let mut base = Array2::zeros((h, w));
    match (&sample.label, &sample.anomaly_mask) {
        (Label::Anomaly, None) => return Err(DiscrepancyError::MissingMask(sample.id.clone())),
        (Label::Anomaly, Some(mask)) => {
            let m = mask.mapv(|v| f64::from(v != 0));
            base = small_blur(&m);
        }
        (Label::Normal, _) => {}
    }
    if noise_level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_level).expect("positive std");
        base.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    base.mapv_inplace(|v| v.clamp(0.0, 1.0));
    DiscrepancyImage::new(base)
}

/// Arithmetic mean of all pixel scores.
pub fn mean_anomaly_score(d: &DiscrepancyImage) -> f64 {
    d.scores.mean().unwrap_or(0.0)
}

/// Five-number summary plus mean; quartiles by linear interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

pub fn score_distribution_stats(scores: &[f64]) -> DiscResult<ScoreStats> {
    if scores.is_empty() {
        return Err(DiscrepancyError::EmptyScores);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let quantile = |p: f64| -> f64 {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    Ok(ScoreStats {
        min: sorted[0],
        q1: quantile(0.25),
        median: quantile(0.5),
        q3: quantile(0.75),
        max: sorted[sorted.len() - 1],
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
    })
}

/// Appends the discrepancy map as a fourth channel. The RGB planes are
/// copied bitwise; attaching to an already-4-channel sample is an error.
pub fn attach_fourth_channel(
    sample: &ImageSample,
    d: &DiscrepancyImage,
) -> DiscResult<ImageSample> {
    let (c, h, w) = sample.pixels.dim();
    if c != 3 {
        return Err(DiscrepancyError::BadSample {
            id: sample.id.clone(),
            msg: format!("expected a 3-channel sample, got {c} channels"),
        });
    }
    if d.dim() != (h, w) {
        return Err(DiscrepancyError::BadSample {
            id: sample.id.clone(),
            msg: format!("discrepancy {:?} does not match image {:?}", d.dim(), (h, w)),
        });
    }
    let mut pixels = Array3::zeros((4, h, w));
    pixels
        .slice_mut(ndarray::s![0..3, .., ..])
        .assign(&sample.pixels);
    pixels.index_axis_mut(Axis(0), 3).assign(&d.scores);
    Ok(ImageSample::new(
        sample.id.clone(),
        pixels,
        sample.label,
        sample.anomaly_mask.clone(),
        sample.split,
        sample.dataset.clone(),
    )?)
}

/// Removes the fourth channel, restoring the original RGB sample bitwise.
pub fn strip_fourth_channel(sample: &ImageSample) -> DiscResult<ImageSample> {
    let (c, _, _) = sample.pixels.dim();
    if c != 4 {
        return Err(DiscrepancyError::BadSample {
            id: sample.id.clone(),
            msg: format!("expected a 4-channel sample, got {c} channels"),
        });
    }
    let pixels = sample.pixels.slice(ndarray::s![0..3, .., ..]).to_owned();
    Ok(ImageSample::new(
        sample.id.clone(),
        pixels,
        sample.label,
        sample.anomaly_mask.clone(),
        sample.split,
        sample.dataset.clone(),
    )?)
}

/// Source of discrepancy maps for the pipeline: the oracle stand-in or
/// precomputed PNGs from any external stack.
pub trait DiscrepancyProvider: Send + Sync {
    fn discrepancy_for(&self, sample: &ImageSample) -> DiscResult<DiscrepancyImage>;
}

/// Default provider: [`oracle_discrepancy`] with a per-sample seed derived
/// from the sample id.
pub struct OracleDiscrepancyProvider {
    pub noise_level: f64,
    pub seed: u64,
}

impl DiscrepancyProvider for OracleDiscrepancyProvider {
    fn discrepancy_for(&self, sample: &ImageSample) -> DiscResult<DiscrepancyImage> {
        let sample_seed = seeding::mix(self.seed, seeding::hash_str(&sample.id));
        oracle_discrepancy(sample, self.noise_level, sample_seed)
    }
}

/// Reads precomputed 8-bit grayscale PNGs, `<dir>/<sample id>.png`, mapped
/// linearly to [0, 1].
pub struct FileDiscrepancyProvider {
    pub dir: PathBuf,
}

impl DiscrepancyProvider for FileDiscrepancyProvider {
    fn discrepancy_for(&self, sample: &ImageSample) -> DiscResult<DiscrepancyImage> {
        let path = self.dir.join(format!("{}.png", sample.id));
        let img = image::open(&path)
            .map_err(|source| DiscrepancyError::Data(DataError::ImageDecode {
                path: path.clone(),
                source,
            }))?
            .to_luma8();
        let (w, h) = img.dimensions();
        let mut scores = Array2::zeros((h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            scores[[y as usize, x as usize]] = px.0[0] as f64 / 255.0;
        }
        DiscrepancyImage::new(scores)
    }
}

/// Writes a discrepancy map as an 8-bit grayscale PNG.
pub fn write_discrepancy_png(path: &Path, d: &DiscrepancyImage) -> DiscResult<()> {
    let (h, w) = d.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        px.0[0] = (d.scores[[y as usize, x as usize]] * 255.0).round() as u8;
    }
    img.save(path)
        .map_err(|source| DiscrepancyError::Data(DataError::ImageDecode {
            path: path.to_path_buf(),
            source,
        }))
}

/// One row of the per-dataset score-statistics export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetScoreRow {
    pub dataset: String,
    pub n: usize,
    #[serde(flatten)]
    pub stats: ScoreStats,
}

/// Writes per-dataset score statistics as CSV
/// (`dataset, n, min, q1, median, q3, max, mean`).
pub fn write_score_stats_csv(path: &Path, rows: &[DatasetScoreRow]) -> DiscResult<()> {
    let io_err = |source| DiscrepancyError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    writeln!(f, "dataset,n,min,q1,median,q3,max,mean").map_err(io_err)?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.dataset, r.n, r.stats.min, r.stats.q1, r.stats.median, r.stats.q3, r.stats.max, r.stats.mean
        )
        .map_err(io_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{compute_class_frequencies, Split};
    use ndarray::array;
    use std::collections::BTreeMap;

    fn vocab(ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().collect()
    }

    fn opts(min_area: usize) -> ReplacementOptions {
        ReplacementOptions {
            min_instance_area: min_area,
            ..ReplacementOptions::default()
        }
    }

    #[test]
    fn label_map_rejects_pixels_outside_vocabulary() {
        let classes = array![[1u32, 2], [1, 9]];
        assert!(LabelMap::new(classes, vocab(&[1, 2])).is_err());
    }

    #[test]
    fn forced_choice_single_alternative() {
        // vocabulary of exactly one class other than the original
        let classes = Array2::from_elem((4, 4), 1u32);
        let map = LabelMap::new(classes, vocab(&[1, 2])).unwrap();
        let freqs = compute_class_frequencies(&[Array2::from_elem((4, 4), 2u32)]);
        for seed in 0..5 {
            let (out, plan) =
                frequency_based_label_replacement(&map, &freqs, 1, seed, opts(1)).unwrap();
            assert_eq!(plan.entries.len(), 1);
            assert_eq!(plan.entries[0].1, 1);
            assert_eq!(plan.entries[0].2, 2);
            assert!(out.classes().iter().all(|&v| v == 2));
        }
    }

    #[test]
    fn zero_objects_is_identity() {
        let classes = Array2::from_elem((4, 4), 1u32);
        let map = LabelMap::new(classes, vocab(&[1, 2])).unwrap();
        let freqs = compute_class_frequencies(&[map.classes().clone()]);
        let (out, plan) = frequency_based_label_replacement(&map, &freqs, 0, 7, opts(1)).unwrap();
        assert_eq!(out.classes(), map.classes());
        assert!(plan.entries.is_empty());
    }

    #[test]
    fn too_many_objects_rejected() {
        let classes = Array2::from_elem((4, 4), 1u32);
        let map = LabelMap::new(classes, vocab(&[1, 2])).unwrap();
        let freqs = compute_class_frequencies(&[map.classes().clone()]);
        assert!(matches!(
            frequency_based_label_replacement(&map, &freqs, 2, 0, opts(1)),
            Err(DiscrepancyError::TooFewInstances {
                requested: 2,
                available: 1
            })
        ));
    }

    #[test]
    fn two_class_uniform_swap_is_deterministic() {
        let classes = Array2::from_elem((4, 4), 1u32);
        let map = LabelMap::new(classes, vocab(&[1, 2])).unwrap();
        let (out, plan) = random_label_replacement(&map, 1, 3, opts(1)).unwrap();
        assert!(out.classes().iter().all(|&v| v == 2));
        let (out2, plan2) = random_label_replacement(&map, 1, 3, opts(1)).unwrap();
        assert_eq!(out.classes(), out2.classes());
        assert_eq!(plan, plan2);
    }

    #[test]
    fn replacement_never_keeps_original_class() {
        let mut classes = Array2::from_elem((8, 8), 0u32);
        classes.slice_mut(ndarray::s![0..3, 0..3]).fill(1);
        classes.slice_mut(ndarray::s![5..8, 5..8]).fill(2);
        let map = LabelMap::new(classes, vocab(&[0, 1, 2, 3])).unwrap();
        let freqs = compute_class_frequencies(&[map.classes().clone()]);
        for seed in 0..20 {
            let (_, plan) =
                frequency_based_label_replacement(&map, &freqs, 2, seed, opts(1)).unwrap();
            for (_, orig, repl) in &plan.entries {
                assert_ne!(orig, repl);
            }
            let (_, plan) = random_label_replacement(&map, 2, seed, opts(1)).unwrap();
            for (_, orig, repl) in &plan.entries {
                assert_ne!(orig, repl);
            }
        }
    }

    #[test]
    fn min_area_excludes_specks() {
        let mut classes = Array2::from_elem((8, 8), 0u32);
        classes[[0, 0]] = 1; // 1-pixel speck
        let map = LabelMap::new(classes, vocab(&[0, 1, 2])).unwrap();
        // with min area 4 only the background blob is eligible
        let (_, plan) = random_label_replacement(&map, 1, 1, opts(4)).unwrap();
        assert_eq!(plan.entries[0].1, 0);
    }

    /// Chi-square oracle for the replacement-class distributions of both
    /// modes, on the {A: 0.70, B: 0.25, C: 0.05} setup.
    #[test]
    fn replacement_distributions_match_targets() {
        // a map whose only eligible instance is of class A (id 1);
        // candidates are then B (2) and C (3)
        let classes = Array2::from_elem((4, 4), 1u32);
        let map = LabelMap::new(classes, vocab(&[1, 2, 3])).unwrap();
        // normal-data frequencies: A 70%, B 25%, C 5%
        let mut freqs = ClassFrequencyTable::default();
        freqs.pixel_counts = BTreeMap::from([(1, 7000), (2, 2500), (3, 500)]);
        freqs.total_pixels = 10_000;

        let n = 10_000;
        let mut freq_counts = BTreeMap::from([(2u32, 0f64), (3, 0.0)]);
        let mut unif_counts = freq_counts.clone();
        for seed in 0..n {
            let (_, plan) =
                frequency_based_label_replacement(&map, &freqs, 1, seed, opts(1)).unwrap();
            *freq_counts.get_mut(&plan.entries[0].2).unwrap() += 1.0;
            let (_, plan) = random_label_replacement(&map, 1, seed, opts(1)).unwrap();
            *unif_counts.get_mut(&plan.entries[0].2).unwrap() += 1.0;
        }
        // chi-square with 1 dof at p = 0.01 → 6.635
        let chi = |counts: &BTreeMap<u32, f64>, probs: &[(u32, f64)]| -> f64 {
            probs
                .iter()
                .map(|(c, p)| {
                    let e = p * n as f64;
                    let o = counts[c];
                    (o - e) * (o - e) / e
                })
                .sum()
        };
        // frequency mode: B:C renormalized to 25:5 → 5:1
        let chi_f = chi(&freq_counts, &[(2, 2500.0 / 3000.0), (3, 500.0 / 3000.0)]);
        assert!(chi_f < 6.635, "frequency-mode chi-square {chi_f}");
        let chi_u = chi(&unif_counts, &[(2, 0.5), (3, 0.5)]);
        assert!(chi_u < 6.635, "uniform-mode chi-square {chi_u}");
        // the rare class is chosen strictly less often under frequency mode
        assert!(freq_counts[&3] < unif_counts[&3]);
    }

    fn normal_sample(id: &str) -> ImageSample {
        ImageSample::new(
            id,
            Array3::zeros((3, 8, 8)),
            Label::Normal,
            None,
            Split::Train,
            "t",
        )
        .unwrap()
    }

    fn anomaly_sample(id: &str) -> ImageSample {
        let mut mask = Array2::zeros((8, 8));
        mask[[4, 4]] = 255;
        mask[[4, 5]] = 255;
        ImageSample::new(
            id,
            Array3::zeros((3, 8, 8)),
            Label::Anomaly,
            Some(mask),
            Split::Train,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn oracle_zero_noise_normal_is_all_zero() {
        let d = oracle_discrepancy(&normal_sample("n"), 0.0, 1).unwrap();
        assert!(d.scores().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_zero_noise_anomaly_positive_on_blurred_support() {
        let s = anomaly_sample("a");
        let d = oracle_discrepancy(&s, 0.0, 1).unwrap();
        // positive at and right next to the mask, zero far away
        assert!(d.scores()[[4, 4]] > 0.0);
        assert!(d.scores()[[4, 6]] > 0.0);
        assert!(d.scores()[[0, 0]] == 0.0);
        // support is exactly the double-blur neighborhood (radius 2) of the
        // mask pixels at (4,4) and (4,5)
        for ((y, x), &v) in d.scores().indexed_iter() {
            let near = (2..=6).contains(&y) && (2..=7).contains(&x);
            assert_eq!(v > 0.0, near, "at ({y}, {x})");
        }
    }

    #[test]
    fn oracle_scores_separate_anomalies_from_normals() {
        let n = 100;
        for noise in [0.05, 0.2] {
            let mut anom_mean = 0.0;
            let mut norm_mean = 0.0;
            for i in 0..n {
                let a = oracle_discrepancy(&anomaly_sample("a"), noise, i).unwrap();
                let m = oracle_discrepancy(&normal_sample("n"), noise, i + 1000).unwrap();
                anom_mean += mean_anomaly_score(&a);
                norm_mean += mean_anomaly_score(&m);
            }
            assert!(anom_mean > norm_mean, "noise level {noise}");
        }
    }

    #[test]
    fn mean_score_trivial_cases() {
        let zero = DiscrepancyImage::new(Array2::zeros((4, 4))).unwrap();
        assert_eq!(mean_anomaly_score(&zero), 0.0);
        let one = DiscrepancyImage::new(Array2::ones((4, 4))).unwrap();
        assert_eq!(mean_anomaly_score(&one), 1.0);
        let half =
            DiscrepancyImage::new(Array2::from_shape_fn((2, 2), |(y, _)| f64::from(y == 0)))
                .unwrap();
        assert_eq!(mean_anomaly_score(&half), 0.5);
    }

    #[test]
    fn score_stats_cases() {
        let s = score_distribution_stats(&[0.5]).unwrap();
        for v in [s.min, s.q1, s.median, s.q3, s.max, s.mean] {
            assert_eq!(v, 0.5);
        }
        let s = score_distribution_stats(&[0.0, 1.0]).unwrap();
        assert_eq!(s.median, 0.5);
        assert!(score_distribution_stats(&[]).is_err());
    }

    #[test]
    fn score_stats_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..101).map(|_| rng.random_range(0.0..1.0)).collect();
        let got = score_distribution_stats(&scores).unwrap();
        // independent oracle: explicit rank positions on a sorted copy
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let q = |p: f64| {
            let pos = p * (n - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - pos.floor())
        };
        assert_eq!(got.min, sorted[0]);
        assert_eq!(got.max, sorted[n - 1]);
        assert!((got.q1 - q(0.25)).abs() < 1e-12);
        assert!((got.median - q(0.5)).abs() < 1e-12);
        assert!((got.q3 - q(0.75)).abs() < 1e-12);
        assert!((got.mean - scores.iter().sum::<f64>() / n as f64).abs() < 1e-12);
    }

    #[test]
    fn attach_and_strip_round_trip() {
        let s = normal_sample("x");
        let zero = DiscrepancyImage::new(Array2::zeros((8, 8))).unwrap();
        let four = attach_fourth_channel(&s, &zero).unwrap();
        assert_eq!(four.channels(), 4);
        assert_eq!(
            four.pixels.slice(ndarray::s![0..3, .., ..]),
            s.pixels.view()
        );
        assert!(four.pixels.index_axis(Axis(0), 3).iter().all(|&v| v == 0.0));
        // attaching twice is an error
        assert!(attach_fourth_channel(&four, &zero).is_err());
        // strip restores the original bitwise
        let back = strip_fourth_channel(&four).unwrap();
        assert_eq!(back.pixels, s.pixels);
        assert!(strip_fourth_channel(&s).is_err());
    }

    mod properties {
        use super::*;
        use crate::datamodel::Split;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            /// strip(attach(x, d)) == x bitwise, and the attached channel
            /// carries d exactly.
            #[test]
            fn attach_strip_roundtrip(
                seed in 0u64..1000,
                side in 4usize..12,
            ) {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let pixels = Array3::from_shape_fn((3, side, side), |_| {
                    rng.random_range(0.0..1.0)
                });
                let sample = ImageSample::new(
                    "p",
                    pixels,
                    Label::Normal,
                    None,
                    Split::Train,
                    "t",
                )
                .unwrap();
                let d = DiscrepancyImage::new(Array2::from_shape_fn(
                    (side, side),
                    |_| rng.random_range(0.0..1.0),
                ))
                .unwrap();
                let four = attach_fourth_channel(&sample, &d).unwrap();
                prop_assert_eq!(
                    four.pixels.index_axis(Axis(0), 3).to_owned(),
                    d.scores().clone()
                );
                let back = strip_fourth_channel(&four).unwrap();
                prop_assert_eq!(back.pixels, sample.pixels);
            }
        }
    }

    #[test]
    fn file_provider_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = DiscrepancyImage::new(Array2::from_shape_fn((8, 8), |(y, x)| {
            ((y * 8 + x) as f64 / 63.0 * 255.0).round() / 255.0
        }))
        .unwrap();
        let s = normal_sample("s0");
        write_discrepancy_png(&dir.path().join("s0.png"), &d).unwrap();
        let provider = FileDiscrepancyProvider {
            dir: dir.path().to_path_buf(),
        };
        let loaded = provider.discrepancy_for(&s).unwrap();
        for (a, b) in loaded.scores().iter().zip(d.scores().iter()) {
            assert!((a - b).abs() < 0.5 / 255.0);
        }
    }

    #[test]
    fn provider_output_always_in_range() {
        let provider = OracleDiscrepancyProvider {
            noise_level: 0.5,
            seed: 9,
        };
        for i in 0..10 {
            let d = provider
                .discrepancy_for(&anomaly_sample(&format!("a{i}")))
                .unwrap();
            assert!(d.scores().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
