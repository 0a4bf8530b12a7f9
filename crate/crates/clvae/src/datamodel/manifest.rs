//! JSON-lines dataset manifests and PNG sample I/O.
//!
//! Format: a header line `{"manifest_version": 1}` followed by one object
//! per entry: `{"image": path, "mask": path|null, "label": "normal"|"anomaly",
//! "dataset": tag}`. Entries may carry an optional `"split"` tag; entries
//! without one are assigned by [`super::split_dataset`] downstream.

use super::{DataError, DataResult, ImageSample, Label, Split};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub label: Label,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// A validated manifest. Relative entry paths resolve against `root`
/// (the manifest's parent directory).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }
}

#[derive(Deserialize)]
struct Header {
    manifest_version: u32,
}

#[derive(Deserialize)]
struct RawEntry {
    image: String,
    #[serde(default)]
    mask: Option<String>,
    label: String,
    dataset: String,
    #[serde(default)]
    split: Option<String>,
}

fn parse_label(raw: &str, line: usize) -> DataResult<Label> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "normal" => Ok(Label::Normal),
        "anomaly" => Ok(Label::Anomaly),
        other => Err(DataError::ManifestParse {
            line,
            msg: format!("unknown label {other:?}"),
        }),
    }
}

fn parse_split(raw: &str, line: usize) -> DataResult<Split> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(DataError::ManifestParse {
            line,
            msg: format!("unknown split {other:?}"),
        }),
    }
}

/// Loads and validates a manifest: header version, per-line parse, unique
/// image paths, and existence of every referenced file.
pub fn load_manifest(path: &Path) -> DataResult<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let reader = BufReader::new(file);

    let mut version = None;
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if version.is_none() {
            let header: Header =
                serde_json::from_str(trimmed).map_err(|e| DataError::ManifestParse {
                    line: line_no,
                    msg: format!("expected manifest header: {e}"),
                })?;
            if header.manifest_version != MANIFEST_VERSION {
                return Err(DataError::ManifestParse {
                    line: line_no,
                    msg: format!("unsupported manifest_version {}", header.manifest_version),
                });
            }
            version = Some(header.manifest_version);
            continue;
        }
        let raw: RawEntry =
            serde_json::from_str(trimmed).map_err(|e| DataError::ManifestParse {
                line: line_no,
                msg: e.to_string(),
            })?;
        if !seen.insert(raw.image.clone()) {
            return Err(DataError::DuplicatePath(raw.image));
        }
        entries.push(ManifestEntry {
            image: PathBuf::from(&raw.image),
            mask: raw.mask.map(PathBuf::from),
            label: parse_label(&raw.label, line_no)?,
            dataset: raw.dataset,
            split: raw
                .split
                .as_deref()
                .map(|s| parse_split(s, line_no))
                .transpose()?,
        });
    }
    let version = version.ok_or(DataError::ManifestParse {
        line: 1,
        msg: "missing manifest header".into(),
    })?;

    let manifest = DatasetManifest {
        version,
        entries,
        root,
    };
    let missing: Vec<String> = manifest
        .entries
        .iter()
        .flat_map(|e| std::iter::once(&e.image).chain(e.mask.iter()))
        .filter(|p| !manifest.resolve(p).exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingFiles(missing));
    }
    Ok(manifest)
}

/// Writes a manifest deterministically (header line, then entries in order).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> DataResult<()> {
    let mut file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    writeln!(file, "{{\"manifest_version\": {MANIFEST_VERSION}}}").map_err(io_err)?;
    for entry in entries {
        let line = serde_json::to_string(entry).expect("manifest entry serializes");
        writeln!(file, "{line}").map_err(io_err)?;
    }
    Ok(())
}

fn load_rgb(path: &Path) -> DataResult<Array3<f64>> {
    let img = image::open(path)
        .map_err(|source| DataError::ImageDecode {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

fn load_mask(path: &Path) -> DataResult<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| DataError::ImageDecode {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0];
    }
    Ok(out)
}

/// Loads every manifest entry into memory. Sample ids are the entry's image
/// path with its extension stripped.
pub fn load_samples(manifest: &DatasetManifest) -> DataResult<Vec<ImageSample>> {
    manifest
        .entries
        .iter()
        .map(|entry| {
            let pixels = load_rgb(&manifest.resolve(&entry.image))?;
            let mask = entry
                .mask
                .as_ref()
                .map(|m| load_mask(&manifest.resolve(m)))
                .transpose()?;
            let id = entry.image.with_extension("").display().to_string();
            ImageSample::new(
                id,
                pixels,
                entry.label,
                mask,
                entry.split.unwrap_or(Split::Train),
                entry.dataset.clone(),
            )
        })
        .collect()
}

/// Saves the RGB channels of a sample as an 8-bit PNG.
pub fn write_image_png(path: &Path, pixels: &Array3<f64>) -> DataResult<()> {
    let (_, h, w) = pixels.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            px.0[c] = (pixels[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path).map_err(|source| DataError::ImageDecode {
        path: path.to_path_buf(),
        source,
    })
}

/// Saves a binary mask as an 8-bit grayscale PNG (nonzero = anomaly).
pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> DataResult<()> {
    let (h, w) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        px.0[0] = mask[[y as usize, x as usize]];
    }
    img.save(path).map_err(|source| DataError::ImageDecode {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Split;

    fn write_file(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        p
    }

    fn touch_png(dir: &Path, name: &str) {
        let img = Array3::from_elem((3, 4, 4), 0.5);
        write_image_png(&dir.join(name), &img).unwrap();
    }

    #[test]
    fn empty_manifest_with_header_is_ok() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "m.jsonl", "{\"manifest_version\": 1}\n");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.version, 1);
        assert!(m.entries.is_empty());
    }

    #[test]
    fn duplicate_path_is_named() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(dir.path(), "a.png");
        touch_png(dir.path(), "b.png");
        let body = concat!(
            "{\"manifest_version\": 1}\n",
            "{\"image\": \"a.png\", \"mask\": null, \"label\": \"normal\", \"dataset\": \"d\"}\n",
            "{\"image\": \"b.png\", \"mask\": null, \"label\": \"normal\", \"dataset\": \"d\"}\n",
            "{\"image\": \"a.png\", \"mask\": null, \"label\": \"normal\", \"dataset\": \"d\"}\n",
        );
        let p = write_file(dir.path(), "m.jsonl", body);
        match load_manifest(&p) {
            Err(DataError::DuplicatePath(d)) => assert_eq!(d, "a.png"),
            other => panic!("expected DuplicatePath, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"manifest_version\": 1}\nnot json\n";
        let p = write_file(dir.path(), "m.jsonl", body);
        match load_manifest(&p) {
            Err(DataError::ManifestParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected ManifestParse, got {other:?}"),
        }
    }

    #[test]
    fn missing_files_all_listed() {
        let dir = tempfile::tempdir().unwrap();
        let body = concat!(
            "{\"manifest_version\": 1}\n",
            "{\"image\": \"x.png\", \"mask\": \"y.png\", \"label\": \"anomaly\", \"dataset\": \"d\"}\n",
        );
        let p = write_file(dir.path(), "m.jsonl", body);
        match load_manifest(&p) {
            Err(DataError::MissingFiles(files)) => {
                assert_eq!(files, vec!["x.png".to_string(), "y.png".to_string()]);
            }
            other => panic!("expected MissingFiles, got {other:?}"),
        }
    }

    #[test]
    fn split_counts_preserved() {
        // mirrors a 172/99/64 train/val/test manifest; entry counts per split
        // must survive the round trip
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("{\"manifest_version\": 1}\n");
        let counts = [(Split::Train, 172), (Split::Val, 99), (Split::Test, 64)];
        let mut entries = Vec::new();
        for (split, n) in counts {
            for i in 0..n {
                let name = format!("{}-{i}.png", split.as_str());
                std::fs::File::create(dir.path().join(&name)).unwrap();
                entries.push(ManifestEntry {
                    image: PathBuf::from(name),
                    mask: None,
                    label: Label::Normal,
                    dataset: "laf".into(),
                    split: Some(split),
                });
            }
        }
        for e in &entries {
            body.push_str(&serde_json::to_string(e).unwrap());
            body.push('\n');
        }
        let p = write_file(dir.path(), "m.jsonl", &body);
        let m = load_manifest(&p).unwrap();
        for (split, n) in counts {
            let got = m.entries.iter().filter(|e| e.split == Some(split)).count();
            assert_eq!(got, n, "split {split:?}");
        }
    }

    #[test]
    fn manifest_round_trip_and_sample_loading() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("images")).unwrap();
        touch_png(dir.path(), "images/s0.png");
        let mask = Array2::from_shape_fn((4, 4), |(y, _)| if y == 0 { 255 } else { 0 });
        write_mask_png(&dir.path().join("images/s0_mask.png"), &mask).unwrap();
        let entries = vec![ManifestEntry {
            image: PathBuf::from("images/s0.png"),
            mask: Some(PathBuf::from("images/s0_mask.png")),
            label: Label::Anomaly,
            dataset: "synth".into(),
            split: Some(Split::Test),
        }];
        let mpath = dir.path().join("manifest.jsonl");
        write_manifest(&mpath, &entries).unwrap();
        let m = load_manifest(&mpath).unwrap();
        assert_eq!(m.entries, entries);
        let samples = load_samples(&m).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].id, "images/s0");
        assert_eq!(samples[0].split, Split::Test);
        assert_eq!(samples[0].mask_popcount(), 4);
        assert!((samples[0].pixels[[0, 0, 0]] - 0.5).abs() < 1.0 / 255.0);
    }
}
