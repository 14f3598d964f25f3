//! Checkpoints: a JSON manifest beside an opaque weight blob (and optionally
//! the optimizer moments).
//!
//! `<dir>/<stem>.json` holds the manifest, `<dir>/<stem>.bin` the weights and
//! `<dir>/<stem>.opt.bin` the optimizer state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ssae_tensor::{blob, Adam, ParamStore, Scalar};

use crate::error::{Error, Result};
use crate::roi::RoiLabel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub format_version: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<RoiLabel>,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
    pub seed: u64,
    pub dtype: String,
    pub config: C,
    /// Latest metric values (losses, IoU, ...).
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub weights: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
}

impl<C> Manifest<C> {
    pub fn new<T: Scalar>(kind: &str, config: C, step: u64, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            roi: None,
            step,
            epoch: None,
            seed,
            dtype: T::DTYPE.to_string(),
            config,
            metrics: BTreeMap::new(),
            weights: String::new(),
            optimizer: None,
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes manifest, weights and (when given) optimizer moments. Returns the manifest path.
pub fn save<T: Scalar, C: Serialize>(
    dir: &Path,
    stem: &str,
    mut manifest: Manifest<C>,
    store: &ParamStore<T>,
    optimizer: Option<&Adam<T>>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.weights = format!("{stem}.bin");
    write(&dir.join(&manifest.weights), &store.to_blob())?;
    if let Some(opt) = optimizer {
        let name = format!("{stem}.opt.bin");
        let entries = opt.state_entries(store);
        let refs: Vec<(&str, &_)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write(&dir.join(&name), &blob::encode(&refs))?;
        manifest.optimizer = Some(name);
    }
    let path = dir.join(format!("{stem}.json"));
    write(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

pub fn read_manifest<C: DeserializeOwned>(path: &Path) -> Result<Manifest<C>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest<C> = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("format version {} unsupported (expected {FORMAT_VERSION})", m.format_version),
        });
    }
    Ok(m)
}

fn sibling(manifest_path: &Path, name: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(name)
}

/// Loads weights named by the manifest into `store`, which must already have the right layout.
pub fn load_weights<T: Scalar, C>(manifest_path: &Path, manifest: &Manifest<C>, store: &mut ParamStore<T>) -> Result<()> {
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint {
            path: manifest_path.to_path_buf(),
            detail: format!("stored dtype {} but loading as {}", manifest.dtype, T::DTYPE),
        });
    }
    let path = sibling(manifest_path, &manifest.weights);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    store.load_blob(&bytes).map_err(|e| Error::Checkpoint { path, detail: e.to_string() })
}

pub fn load_optimizer<T: Scalar, C>(
    manifest_path: &Path,
    manifest: &Manifest<C>,
    store: &ParamStore<T>,
    opt: &mut Adam<T>,
    optimizer_step: u64,
) -> Result<()> {
    let name = manifest.optimizer.as_ref().ok_or_else(|| Error::Checkpoint {
        path: manifest_path.to_path_buf(),
        detail: "no optimizer state saved".into(),
    })?;
    let path = sibling(manifest_path, name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let entries = blob::decode::<T>(&bytes)?;
    opt.load_state_entries(store, entries, optimizer_step).map_err(|e| Error::Checkpoint { path, detail: e.to_string() })
}
