//! Dataset representation: labeled image samples, manifest ingestion,
//! filtering and splitting rules, and a synthetic scene generator that
//! stands in for urban-driving datasets at desk scale.

mod freq;
mod manifest;
mod resize;
mod split;
mod synth;

pub use freq::{compute_class_frequencies, connected_components, ClassFrequencyTable, Component};
pub use manifest::{
    load_manifest, load_samples, write_image_png, write_manifest, write_mask_png,
    DatasetManifest, ManifestEntry,
};
pub use resize::{downsample_image, downsample_mask};
pub use split::{split_dataset, DatasetSplits, SplitSpec};
pub use synth::{
    generate_synthetic_dataset, generate_synthetic_scenes, BackgroundParams, ObjectClass,
    PlacedObject, Shape, SynthScene, SynthSceneSpec,
};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

pub type DataResult<T> = Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error("duplicate image path in manifest: {0}")]
    DuplicatePath(String),
    #[error("manifest references missing files: {}", .0.join(", "))]
    MissingFiles(Vec<String>),
    #[error("image decode error at {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("sample {id}: {msg}")]
    InvalidSample { id: String, msg: String },
    #[error("anomaly sample {0} has no mask")]
    MissingMask(String),
    #[error("split fractions must be nonnegative and sum to 1")]
    BadSplitSpec,
    #[error("cannot split an empty sample list")]
    EmptyInput,
    #[error("upscaling requested: target {target:?} exceeds source {from:?}")]
    Upscale {
        from: (usize, usize),
        target: (usize, usize),
    },
    #[error("invalid scene spec: {0}")]
    BadSceneSpec(String),
}

/// Ground-truth class of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomaly => "anomaly",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// An image with its label, optional anomaly mask, and bookkeeping tags.
///
/// Pixels are stored channel-major (`C×H×W`) with values in `[0, 1]`.
/// Three channels are RGB; a fourth channel, when present, is an attached
/// discrepancy map.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Array3<f64>,
    pub label: Label,
    pub anomaly_mask: Option<Array2<u8>>,
    pub split: Split,
    pub dataset: String,
}

impl ImageSample {
    /// Builds a sample, validating pixel range, channel count, and mask shape.
    pub fn new(
        id: impl Into<String>,
        pixels: Array3<f64>,
        label: Label,
        anomaly_mask: Option<Array2<u8>>,
        split: Split,
        dataset: impl Into<String>,
    ) -> DataResult<Self> {
        let id = id.into();
        let (c, h, w) = pixels.dim();
        if c != 3 && c != 4 {
            return Err(DataError::InvalidSample {
                id,
                msg: format!("expected 3 or 4 channels, got {c}"),
            });
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(DataError::InvalidSample {
                id,
                msg: "pixel values must be finite and in [0, 1]".into(),
            });
        }
        if let Some(mask) = &anomaly_mask {
            if mask.dim() != (h, w) {
                return Err(DataError::InvalidSample {
                    id,
                    msg: format!(
                        "mask shape {:?} does not match image {:?}",
                        mask.dim(),
                        (h, w)
                    ),
                });
            }
            if label == Label::Anomaly && !mask.iter().any(|&m| m != 0) {
                return Err(DataError::InvalidSample {
                    id,
                    msg: "anomaly mask has no set pixels".into(),
                });
            }
        }
        Ok(Self {
            id,
            pixels,
            label,
            anomaly_mask,
            split,
            dataset: dataset.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// Number of set pixels in the anomaly mask (0 when absent).
    pub fn mask_popcount(&self) -> usize {
        self.anomaly_mask
            .as_ref()
            .map(|m| m.iter().filter(|&&v| v != 0).count())
            .unwrap_or(0)
    }
}

/// Keeps samples whose anomaly mask has at least `min_pixels` set pixels.
///
/// Normal samples pass through unchanged. An anomaly sample without a mask
/// is an error.
pub fn filter_by_anomaly_pixels(
    samples: Vec<ImageSample>,
    min_pixels: usize,
) -> DataResult<Vec<ImageSample>> {
    let mut kept = Vec::with_capacity(samples.len());
    for sample in samples {
        match sample.label {
            Label::Normal => kept.push(sample),
            Label::Anomaly => {
                if sample.anomaly_mask.is_none() {
                    return Err(DataError::MissingMask(sample.id));
                }
                if sample.mask_popcount() >= min_pixels {
                    kept.push(sample);
                }
            }
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sample_with_mask(id: &str, set_pixels: usize) -> ImageSample {
        let mut mask = Array2::<u8>::zeros((8, 8));
        for (i, v) in mask.iter_mut().enumerate() {
            if i < set_pixels {
                *v = 1;
            }
        }
        let label = if set_pixels > 0 {
            Label::Anomaly
        } else {
            Label::Normal
        };
        ImageSample::new(
            id,
            Array3::zeros((3, 8, 8)),
            label,
            Some(mask),
            Split::Train,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn sample_rejects_out_of_range_pixels() {
        let mut px = Array3::zeros((3, 4, 4));
        px[[0, 0, 0]] = 1.5;
        let err = ImageSample::new("x", px, Label::Normal, None, Split::Train, "t");
        assert!(err.is_err());
    }

    #[test]
    fn sample_rejects_bad_channel_count() {
        let px = Array3::zeros((2, 4, 4));
        assert!(ImageSample::new("x", px, Label::Normal, None, Split::Train, "t").is_err());
    }

    #[test]
    fn anomaly_sample_requires_nonempty_mask() {
        let px = Array3::zeros((3, 4, 4));
        let mask = Array2::<u8>::zeros((4, 4));
        let err = ImageSample::new("x", px, Label::Anomaly, Some(mask), Split::Train, "t");
        assert!(err.is_err());
    }

    #[test]
    fn filter_removes_empty_mask_sample() {
        // label=anomaly with an all-zero mask cannot be constructed, so build
        // the boundary case through the filter instead: 0 < 3000.
        let s = sample_with_mask("a", 1);
        let out = filter_by_anomaly_pixels(vec![s], 3000).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn filter_keeps_exact_boundary() {
        let mut mask = Array2::<u8>::zeros((64, 64));
        for (i, v) in mask.iter_mut().enumerate() {
            if i < 3000 {
                *v = 255;
            }
        }
        let s = ImageSample::new(
            "b",
            Array3::zeros((3, 64, 64)),
            Label::Anomaly,
            Some(mask),
            Split::Train,
            "t",
        )
        .unwrap();
        let out = filter_by_anomaly_pixels(vec![s], 3000).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn filter_errors_on_maskless_anomaly() {
        let s = ImageSample::new(
            "c",
            Array3::zeros((3, 4, 4)),
            Label::Anomaly,
            None,
            Split::Train,
            "t",
        )
        .unwrap();
        match filter_by_anomaly_pixels(vec![s], 1) {
            Err(DataError::MissingMask(id)) => assert_eq!(id, "c"),
            other => panic!("expected MissingMask, got {other:?}"),
        }
    }

    #[test]
    fn filter_matches_bruteforce_popcount() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for min_pixels in [0usize, 5, 20, 64] {
            let samples: Vec<ImageSample> = (0..10)
                .map(|i| {
                    let set = rng.random_range(1..=64usize);
                    sample_with_mask(&format!("s{i}"), set)
                })
                .collect();
            let expected: Vec<String> = samples
                .iter()
                .filter(|s| {
                    s.label == Label::Normal
                        || s.anomaly_mask
                            .as_ref()
                            .map(|m| {
                                let mut n = 0usize;
                                for v in m.iter() {
                                    if *v != 0 {
                                        n += 1;
                                    }
                                }
                                n >= min_pixels
                            })
                            .unwrap_or(false)
                })
                .map(|s| s.id.clone())
                .collect();
            let got: Vec<String> = filter_by_anomaly_pixels(samples, min_pixels)
                .unwrap()
                .into_iter()
                .map(|s| s.id)
                .collect();
            assert_eq!(got, expected, "min_pixels={min_pixels}");
        }
    }
}
