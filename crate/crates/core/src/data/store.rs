//! Locating the source images and persisting built datasets.
//!
//! A built dataset is a directory with `manifest.json` and `indices.json`
//! (the selected positions in the source training partition). The source
//! itself is never copied.

use std::fs;
use std::path::{Path, PathBuf};

use super::cifar::{load_cifar10, TRAIN_FILES};
use super::longtail::{build_dataset, index_digest, DatasetManifest, DatasetRequest, Profile, Scale};
use super::LabeledImageSet;
use crate::error::{Error, Result};

pub const DATA_DIR_ENV: &str = "DGAN_DATA_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDICES_FILE: &str = "indices.json";

/// The directory holding the CIFAR batch files: `root` itself or its
/// `cifar-10-batches-bin` child.
pub fn cifar_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if !root.join(TRAIN_FILES[0]).exists() && nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// `explicit` if given, else `$DGAN_DATA_DIR`.
pub fn source_root(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::Config(format!("no data source: pass --source or set {DATA_DIR_ENV}"))),
    }
}

pub fn load_source(root: &Path) -> Result<LabeledImageSet> {
    load_cifar10(&cifar_dir(root))
}

pub fn write_built(dir: &Path, indices: &[usize], manifest: &DatasetManifest) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let ip = dir.join(INDICES_FILE);
    let idx = serde_json::to_string(indices).map_err(|e| Error::json("indices", e))?;
    fs::write(&ip, idx).map_err(|e| Error::io(format!("writing {}", ip.display()), e))?;
    let mp = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json("manifest", e))?;
    fs::write(&mp, text).map_err(|e| Error::io(format!("writing {}", mp.display()), e))?;
    Ok(mp)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Manifest and indices of a built dataset. `path` is the manifest or its
/// directory; the index list must match the recorded digest.
pub fn read_built(path: &Path) -> Result<(Vec<usize>, DatasetManifest)> {
    let mp = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let manifest = read_manifest(&mp)?;
    let ip = mp.with_file_name(INDICES_FILE);
    let text = fs::read_to_string(&ip).map_err(|e| Error::io(format!("reading {}", ip.display()), e))?;
    let indices: Vec<usize> = serde_json::from_str(&text).map_err(|e| Error::json(ip.display().to_string(), e))?;
    if index_digest(&indices) != manifest.indices_sha256 || indices.len() != manifest.total {
        return Err(Error::CorruptData {
            path: ip,
            reason: "index list does not match the manifest digest".into(),
        });
    }
    Ok((indices, manifest))
}

/// Like [`read_built`], but a manifest without an index list (as copied
/// into a run directory) is rebuilt from its request and seed and checked
/// against the recorded digest.
pub fn read_or_rebuild(path: &Path, source: &LabeledImageSet) -> Result<(Vec<usize>, DatasetManifest)> {
    let mp = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    if mp.with_file_name(INDICES_FILE).exists() {
        return read_built(&mp);
    }
    let manifest = read_manifest(&mp)?;
    let (indices, rebuilt) = build_dataset(source, &manifest.request, manifest.seed)?;
    if rebuilt.indices_sha256 != manifest.indices_sha256 || rebuilt.source_images != manifest.source_images {
        return Err(Error::CorruptData {
            path: mp,
            reason: "the source does not reproduce this manifest".into(),
        });
    }
    Ok((indices, manifest))
}

/// Resolve a configured dataset against the source partition: a profile
/// name is built with `seed` at `scale`, anything else is read as a built
/// dataset.
pub fn resolve(dataset: &str, scale: Scale, seed: u64, source: &LabeledImageSet) -> Result<(LabeledImageSet, DatasetManifest)> {
    let (indices, manifest) = match Profile::parse(dataset) {
        Ok(profile) => build_dataset(source, &DatasetRequest::Profile { profile, scale }, seed)?,
        Err(_) => {
            let p = Path::new(dataset);
            if !p.exists() {
                return Err(Error::Config(format!(
                    "dataset `{dataset}` is neither a profile (full, partial, imbalanced) nor an existing manifest"
                )));
            }
            let (indices, manifest) = read_or_rebuild(p, source)?;
            if manifest.source_images != source.len() {
                return Err(Error::CorruptData {
                    path: p.to_path_buf(),
                    reason: format!(
                        "built from {} source images, the source has {}",
                        manifest.source_images,
                        source.len()
                    ),
                });
            }
            (indices, manifest)
        }
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= source.len()) {
        return Err(Error::Contract(format!("index {bad} outside the source")));
    }
    Ok((source.select(&indices)?, manifest))
}
