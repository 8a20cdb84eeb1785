//! Evaluation drivers: sampling, reference statistics with an on-disk cache,
//! FID/IS of a sampler, and class-conditional FID with the small-sample
//! scale correction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::extractor::{extract_all, FeatureExtractor};
use super::{fid, gaussian_stats, inception_score, FeatureStats};
use crate::autograd::Graph;
use crate::container::Container;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::models::{Binding, EncoderSpec, GeneratorSpec, Mode, NormStats, ParamSet};
use crate::scalar::Scalar;
use crate::seed::{self, Substream};
use crate::tensor::Tensor;

/// Reference value of the small-sample FID scale factor at full scale
/// (100 samples against 10,000). Runs estimate their own factor.
pub const FULL_SCALE_FACTOR_REFERENCE: f64 = 1.0 / 16.0;
pub const DEFAULT_SPLITS: usize = 10;
pub const SCALE_DRAWS: usize = 5;
const SAMPLE_CHUNK: usize = 250;

/// A source of (n, 3, 32, 32) images in [-1, 1], deterministic in `seed`.
pub trait ImageSampler<T: Scalar> {
    fn sample(&self, n: usize, seed: u64) -> Result<Tensor<T>>;
}

/// Draws `z ~ N(0, I)` and runs the generator with running batch statistics.
pub struct GeneratorSampler<'a, T: Scalar> {
    pub spec: &'a GeneratorSpec,
    pub params: &'a ParamSet<T>,
}

impl<T: Scalar> ImageSampler<T> for GeneratorSampler<'_, T> {
    fn sample(&self, n: usize, seed: u64) -> Result<Tensor<T>> {
        crate::trainer::sample(self.spec, self.params, n, seed, SAMPLE_CHUNK)
    }
}

/// Replays real images: a seeded permutation of the set, truncated to `n`.
/// With `n` equal to the set size it reproduces the set exactly.
pub struct MemorizedSampler<'a> {
    pub set: &'a LabeledImageSet,
}

impl<T: Scalar> ImageSampler<T> for MemorizedSampler<'_> {
    fn sample(&self, n: usize, seed: u64) -> Result<Tensor<T>> {
        if n > self.set.len() {
            return Err(Error::InsufficientSamples {
                class: "all".into(),
                requested: n,
                available: self.set.len(),
            });
        }
        let mut order: Vec<usize> = (0..self.set.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[]));
        Ok(self.set.batch(&order[..n]))
    }
}

/// Encoder features (n, d) in inference mode.
pub fn encode_images<T: Scalar>(spec: &EncoderSpec, params: &ParamSet<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let n = images.dim(0);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + SAMPLE_CHUNK).min(n);
        let g = Graph::new();
        let b = Binding::new(&g, params, false);
        let x = g.constant(images.slice_outer(start, end));
        let h = spec.forward(&b, x, Mode::Eval, &mut NormStats::new())?;
        parts.push(g.value(h).clone());
        start = end;
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(&[0, spec.feature_dim]));
    }
    Tensor::cat_outer(&parts.iter().collect::<Vec<_>>())
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    dataset_hash: String,
    extractor_id: String,
    n: usize,
    dim: usize,
}

pub fn stats_cache_path(dir: &Path, dataset_hash: &str, extractor_id: &str) -> PathBuf {
    let ext: String = extractor_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    dir.join(format!("ref-{}-{ext}.stats", &dataset_hash[..dataset_hash.len().min(16)]))
}

pub fn write_stats(path: &Path, stats: &FeatureStats, dataset_hash: &str, extractor_id: &str) -> Result<()> {
    let meta = CacheMeta {
        dataset_hash: dataset_hash.into(),
        extractor_id: extractor_id.into(),
        n: stats.n,
        dim: stats.dim(),
    };
    let mut c = Container::new(serde_json::to_value(meta).map_err(|e| Error::json("stats meta", e))?);
    c.put_tensor("mu", &Tensor::from_vec(&[stats.dim()], stats.mu.clone())?)?;
    c.put_tensor("sigma", &Tensor::from_vec(&[stats.dim(), stats.dim()], stats.sigma.clone())?)?;
    c.write(path)
}

/// Read cached statistics; `None` when the file belongs to another dataset
/// or extractor.
pub fn read_stats(path: &Path, dataset_hash: &str, extractor_id: &str) -> Result<Option<FeatureStats>> {
    let c = Container::read(path)?;
    let meta: CacheMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::json("stats meta", e))?;
    if meta.dataset_hash != dataset_hash || meta.extractor_id != extractor_id {
        return Ok(None);
    }
    let stats = FeatureStats {
        mu: c.tensor::<f64>("mu")?.into_data(),
        sigma: c.tensor::<f64>("sigma")?.into_data(),
        n: meta.n,
    };
    stats.validate()?;
    Ok(Some(stats))
}

/// Feature statistics of a whole dataset, read from or written to
/// `cache_dir` when given.
pub fn reference_stats<T: Scalar>(
    set: &LabeledImageSet,
    dataset_hash: &str,
    extractor: &dyn FeatureExtractor<T>,
    cache_dir: Option<&Path>,
) -> Result<FeatureStats> {
    let path = cache_dir.map(|d| stats_cache_path(d, dataset_hash, &extractor.id()));
    if let Some(p) = path.as_deref().filter(|p| p.exists()) {
        if let Some(s) = read_stats(p, dataset_hash, &extractor.id())? {
            log::debug!("reference statistics read from {}", p.display());
            return Ok(s);
        }
    }
    let (feats, _) = extract_all(extractor, &set.to_tensor::<T>())?;
    let stats = gaussian_stats(&feats)?;
    if let Some(p) = path {
        write_stats(&p, &stats, dataset_hash, &extractor.id())?;
        log::info!("reference statistics cached at {}", p.display());
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanScores {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub n_gen: usize,
}

/// FID against `reference` and split Inception Score of `n_gen` samples.
pub fn evaluate_gan<T: Scalar>(
    sampler: &dyn ImageSampler<T>,
    reference: &FeatureStats,
    extractor: &dyn FeatureExtractor<T>,
    n_gen: usize,
    splits: usize,
    seed: u64,
) -> Result<GanScores> {
    if n_gen < 2 * splits.max(1) {
        return Err(Error::InsufficientSamples {
            class: "all".into(),
            requested: 2 * splits.max(1),
            available: n_gen,
        });
    }
    let images = sampler.sample(n_gen, seed::derive(seed, &[Substream::Eval as u64]))?;
    let (feats, probs) = extract_all(extractor, &images)?;
    let stats = gaussian_stats(&feats)?;
    let (is_mean, is_std) = inception_score(&probs, splits)?;
    Ok(GanScores {
        fid: fid(reference, &stats)?,
        is_mean,
        is_std,
        n_gen,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassFid {
    /// FID of the full generated set against the reference.
    pub full_fid: f64,
    /// Mean FID of random `n_per_class` subsets against the reference.
    pub subset_fid: f64,
    pub scale: f64,
    /// Unscaled class FIDs, keyed by class index.
    pub raw: BTreeMap<usize, f64>,
    pub scaled: BTreeMap<usize, f64>,
}

/// Class-conditional FID of `n_gen` generated images.
///
/// Generated images are labeled by `labeler`; the first `n_per_class`
/// images labeled `c` are compared with the real images of class `c`. Each
/// class FID is multiplied by `full_fid / subset_fid`, where `subset_fid`
/// averages the FID of [`SCALE_DRAWS`] random `n_per_class` subsets of the
/// generated set against the whole reference. When `subset_fid` is
/// numerically zero the scale is 1.
#[allow(clippy::too_many_arguments)]
pub fn per_class_fid<T: Scalar>(
    sampler: &dyn ImageSampler<T>,
    real: &LabeledImageSet,
    extractor: &dyn FeatureExtractor<T>,
    labeler: &dyn Fn(&Tensor<T>) -> Result<Vec<usize>>,
    classes: &[usize],
    n_per_class: usize,
    n_gen: usize,
    seed: u64,
) -> Result<PerClassFid> {
    if n_per_class < 2 || classes.is_empty() {
        return Err(Error::Config("per-class FID needs n_per_class >= 2 and at least one class".into()));
    }
    if n_gen < n_per_class {
        return Err(Error::InsufficientSamples {
            class: "all".into(),
            requested: n_per_class,
            available: n_gen,
        });
    }
    let images = sampler.sample(n_gen, seed::derive(seed, &[Substream::Eval as u64]))?;
    let labels = labeler(&images)?;
    if labels.len() != n_gen {
        return Err(Error::Contract(format!("labeler returned {} labels for {n_gen} images", labels.len())));
    }
    let (gen_feats, _) = extract_all(extractor, &images)?;
    let (real_feats, _) = extract_all(extractor, &real.to_tensor::<T>())?;
    let reference = gaussian_stats(&real_feats)?;
    let full_fid = fid(&reference, &gaussian_stats(&gen_feats)?)?;

    let mut subset_fid = 0.0;
    for k in 0..SCALE_DRAWS {
        let mut rng = seed::rng(seed, &[Substream::Eval as u64, 1, k as u64]);
        let mut idx = sample_indices(&mut rng, n_gen, n_per_class).into_vec();
        idx.sort_unstable();
        subset_fid += fid(&reference, &gaussian_stats(&gen_feats.select_outer(&idx))?)? / SCALE_DRAWS as f64;
    }
    let scale = if subset_fid > 1e-9 { full_fid / subset_fid } else { 1.0 };

    let mut raw = BTreeMap::new();
    let mut scaled = BTreeMap::new();
    for &c in classes {
        let name = real.class_names().get(c).cloned().unwrap_or_else(|| c.to_string());
        let gen_idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect();
        if gen_idx.len() < n_per_class {
            return Err(Error::InsufficientSamples {
                class: name,
                requested: n_per_class,
                available: gen_idx.len(),
            });
        }
        let real_idx = real.class_indices(c);
        if real_idx.len() < 2 {
            return Err(Error::InsufficientSamples {
                class: name,
                requested: 2,
                available: real_idx.len(),
            });
        }
        let g = gaussian_stats(&gen_feats.select_outer(&gen_idx[..n_per_class]))?;
        let r = gaussian_stats(&real_feats.select_outer(&real_idx))?;
        let v = fid(&r, &g)?;
        raw.insert(c, v);
        scaled.insert(c, v * scale);
    }
    Ok(PerClassFid {
        full_fid,
        subset_fid,
        scale,
        raw,
        scaled,
    })
}
