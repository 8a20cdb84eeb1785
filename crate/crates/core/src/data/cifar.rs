//! CIFAR-10 binary version: `data_batch_1.bin` .. `data_batch_5.bin`, each a
//! sequence of 3073-byte records (one label byte, then 1024 R, 1024 G and
//! 1024 B bytes, row-major).

use std::fs;
use std::path::{Path, PathBuf};

use super::{LabeledImageSet, CIFAR10_CLASSES, PIXELS};
use crate::error::{Error, Result};

pub const RECORD: usize = PIXELS + 1;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const META: &str = "batches.meta.txt";

/// Load the training partition in file order. Class names come from
/// `batches.meta.txt` when present.
pub fn load_cifar10(dir: &Path) -> Result<LabeledImageSet> {
    if !dir.is_dir() {
        return Err(Error::DatasetNotFound(dir.to_path_buf()));
    }
    let names = read_class_names(dir)?;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in TRAIN_FILES {
        let path = dir.join(f);
        if !path.is_file() {
            return Err(Error::DatasetNotFound(path));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::CorruptData {
                path,
                reason: format!("{} bytes is not a positive multiple of the {RECORD}-byte record", bytes.len()),
            });
        }
        pixels.reserve(bytes.len() / RECORD * PIXELS);
        for (r, rec) in bytes.chunks_exact(RECORD).enumerate() {
            if rec[0] as usize >= names.len() {
                return Err(Error::CorruptData {
                    path,
                    reason: format!("record {r} has label {}", rec[0]),
                });
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    LabeledImageSet::new(pixels, labels, names)
}

fn read_class_names(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(META);
    if !path.is_file() {
        return Ok(CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if names.is_empty() || names.len() > 256 {
        return Err(Error::CorruptData {
            path,
            reason: format!("{} class names", names.len()),
        });
    }
    Ok(names)
}

/// Write `set` as five batch files of (nearly) equal record counts plus the
/// class-name list. Returns the written paths.
pub fn write_cifar10(set: &LabeledImageSet, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let n = set.len();
    let mut out = Vec::new();
    for (k, f) in TRAIN_FILES.iter().enumerate() {
        let (start, end) = (n * k / 5, n * (k + 1) / 5);
        let mut bytes = Vec::with_capacity((end - start) * RECORD);
        for i in start..end {
            bytes.push(set.labels()[i]);
            bytes.extend_from_slice(set.image(i));
        }
        let path = dir.join(f);
        fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        out.push(path);
    }
    let meta = dir.join(META);
    fs::write(&meta, set.class_names().join("\n") + "\n")
        .map_err(|e| Error::io(format!("writing {}", meta.display()), e))?;
    out.push(meta);
    Ok(out)
}
