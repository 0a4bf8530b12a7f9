//! Self-describing checkpoint archive: a magic header, a JSON metadata
//! blob (spec, step, array manifest, caller extras), and the named f64
//! parameter arrays in little-endian binary. Versioned; loaders reject
//! unknown versions.

use super::{PriorSet, Vae, VaeError, VaeResult, VaeSpec, LATENT_SIDE};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CLVAECKP";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u32,
    spec: VaeSpec,
    step: u64,
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// A loaded checkpoint: the reconstructed model, its priors, and whatever
/// extra metadata the writer attached (the pipeline stores its resolved
/// experiment configuration there).
pub struct Checkpoint {
    pub vae: Vae,
    pub priors: PriorSet,
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    vae: &Vae,
    priors: &PriorSet,
    extra: serde_json::Value,
) -> VaeResult<()> {
    let io_err = |source| VaeError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    };
    let mut arrays = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: &[f64]| {
        arrays.push(ArrayEntry {
            name,
            shape,
            offset: data.len() as u64,
            len: values.len() as u64,
        });
        data.extend_from_slice(values);
    };
    vae.visit_params_ref(&mut |name, shape, values| {
        push(name.to_string(), shape.to_vec(), values);
    });
    for (name, m) in [
        ("prior.m_normal", &priors.m_normal),
        ("prior.m_anomaly", &priors.m_anomaly),
    ] {
        push(
            name.to_string(),
            m.shape().to_vec(),
            m.as_slice().expect("standard layout"),
        );
    }

    let meta = Meta {
        version: CHECKPOINT_VERSION,
        spec: vae.spec().clone(),
        step: vae.step,
        arrays,
        extra,
    };
    let meta_bytes = serde_json::to_vec(&meta)
        .map_err(|e| VaeError::BadCheckpoint(format!("meta serialization: {e}")))?;

    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&meta_bytes).map_err(io_err)?;
    for v in &data {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> VaeResult<Checkpoint> {
    let io_err = |source| VaeError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(VaeError::BadCheckpoint("bad magic bytes".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(VaeError::UnsupportedVersion(version));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(io_err)?;
    let meta_len = u64::from_le_bytes(u64buf) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(io_err)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| VaeError::BadCheckpoint(format!("meta parse: {e}")))?;

    let total: u64 = meta.arrays.iter().map(|a| a.len).sum();
    let mut raw = vec![0u8; total as usize * 8];
    r.read_exact(&mut raw).map_err(io_err)?;
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let by_name: HashMap<&str, &ArrayEntry> =
        meta.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
    let slice_of = |name: &str| -> VaeResult<&[f64]> {
        let entry = by_name
            .get(name)
            .ok_or_else(|| VaeError::BadCheckpoint(format!("missing array {name}")))?;
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        data.get(start..end)
            .ok_or_else(|| VaeError::BadCheckpoint(format!("array {name} out of bounds")))
    };

    let mut vae = Vae::new(meta.spec.clone())?;
    vae.step = meta.step;
    let mut load_err = None;
    vae.visit_params(&mut |name, out| match slice_of(name) {
        Ok(values) if values.len() == out.len() => out.copy_from_slice(values),
        Ok(values) => {
            load_err.get_or_insert(VaeError::BadCheckpoint(format!(
                "array {name} length {} does not match model {}",
                values.len(),
                out.len()
            )));
        }
        Err(e) => {
            load_err.get_or_insert(e);
        }
    });
    if let Some(e) = load_err {
        return Err(e);
    }

    let latent = (meta.spec.latent_channels, LATENT_SIDE, LATENT_SIDE);
    let prior_array = |name: &str| -> VaeResult<Array3<f64>> {
        let values = slice_of(name)?;
        Array3::from_shape_vec(latent, values.to_vec())
            .map_err(|e| VaeError::BadCheckpoint(format!("array {name}: {e}")))
    };
    let priors = PriorSet {
        m_normal: prior_array("prior.m_normal")?,
        m_anomaly: prior_array("prior.m_anomaly")?,
    };

    Ok(Checkpoint {
        vae,
        priors,
        extra: meta.extra,
    })
}
