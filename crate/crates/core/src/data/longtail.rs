//! Long-tailed class counts, seeded subsets and the named dataset profiles.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::seed;

/// Rank-to-class assignment of the imbalanced CIFAR-10 profile: frog, ship,
/// deer, automobile, horse, airplane, cat, bird, dog, truck.
pub const CIFAR10_LONGTAIL_PERMUTATION: [usize; 10] = [6, 8, 4, 1, 7, 0, 3, 2, 5, 9];
pub const PAPER_IMBALANCED_MAX: usize = 4500;
pub const PAPER_PARTIAL_PER_CLASS: usize = 1116;
pub const IMBALANCE_FACTOR: f64 = 100.0;
pub const DESK_PER_CLASS: usize = 100;
pub const DESK_IMBALANCED_MAX: usize = 403;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailSpec {
    pub n_max: usize,
    pub imbalance_factor: f64,
    pub num_classes: usize,
    /// `class_permutation[rank]` is the class receiving the rank-th largest count.
    pub class_permutation: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("a long-tail spec needs at least 2 classes".into()));
        }
        if !(self.imbalance_factor >= 1.0 && self.imbalance_factor.is_finite()) {
            return Err(Error::Config(format!("imbalance_factor {} must be >= 1", self.imbalance_factor)));
        }
        let set: BTreeSet<usize> = self.class_permutation.iter().copied().collect();
        if self.class_permutation.len() != self.num_classes
            || set.len() != self.num_classes
            || set.iter().any(|&c| c >= self.num_classes)
        {
            return Err(Error::Config(format!(
                "class_permutation {:?} is not a permutation of 0..{}",
                self.class_permutation, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn cifar10(n_max: usize, imbalance_factor: f64) -> Self {
        LongTailSpec {
            n_max,
            imbalance_factor,
            num_classes: 10,
            class_permutation: CIFAR10_LONGTAIL_PERMUTATION.to_vec(),
            seed: 0,
        }
    }
}

/// `floor(n_max * f^(-i / (C - 1)))` for rank `i`, placed at class
/// `class_permutation[i]`. Values within 1e-9 (relative) below an integer
/// are taken as that integer, so exact powers survive rounding error.
pub fn build_longtail_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let c = spec.num_classes;
    let mut counts = vec![0usize; c];
    for (rank, &class) in spec.class_permutation.iter().enumerate() {
        let exact = spec.n_max as f64 * spec.imbalance_factor.powf(-(rank as f64) / (c - 1) as f64);
        let nearest = exact.round();
        let n = if (exact - nearest).abs() <= 1e-9 * exact.max(1.0) { nearest } else { exact.floor() };
        if n < 1.0 {
            return Err(Error::DegenerateSpec(format!(
                "rank {rank} would receive {exact:.4} samples; raise n_max or lower the imbalance factor"
            )));
        }
        counts[class] = n as usize;
    }
    Ok(counts)
}

/// Indices into `full` of a subset with exactly `counts[c]` images of class
/// `c`. Per class, a partial Fisher-Yates shuffle driven by the stream
/// `(seed, c)` picks the members; the class-grouped list is then shuffled
/// by the stream `(seed, C)`.
pub fn select_subset_indices(full: &LabeledImageSet, counts: &[usize], seed: u64) -> Result<Vec<usize>> {
    let c = full.num_classes();
    if counts.len() != c {
        return Err(Error::Contract(format!("{} counts for {c} classes", counts.len())));
    }
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (class, &k) in counts.iter().enumerate() {
        let mut pool = full.class_indices(class);
        if k > pool.len() {
            return Err(Error::InsufficientSamples {
                class: full.class_names()[class].clone(),
                requested: k,
                available: pool.len(),
            });
        }
        let mut rng = seed::rng(seed, &[class as u64]);
        for i in 0..k {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        out.extend_from_slice(&pool[..k]);
    }
    out.shuffle(&mut seed::rng(seed, &[c as u64]));
    Ok(out)
}

pub fn build_subset(full: &LabeledImageSet, counts: &[usize], seed: u64) -> Result<LabeledImageSet> {
    full.select(&select_subset_indices(full, counts, seed)?)
}

/// sha256 of an index list written as consecutive little-endian u64.
pub fn index_digest(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in indices {
        h.update((i as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Full,
    Partial,
    Imbalanced,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Full, Profile::Partial, Profile::Imbalanced];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Partial => "partial",
            Profile::Imbalanced => "imbalanced",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown profile `{s}` (expected full, partial or imbalanced)")))
    }
}

/// Paper scale uses the whole training partition (or the published subset
/// sizes); desk scale draws about 1,000 images from the paper-scale set of
/// the same profile, preserving its class shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Paper,
    Desk,
}

/// What to build: a named profile or an explicit long-tail spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRequest {
    Profile { profile: Profile, scale: Scale },
    Custom(LongTailSpec),
}

/// Persisted description of a built dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub request: DatasetRequest,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub total: usize,
    pub source_images: usize,
    pub indices_sha256: String,
}

impl DatasetManifest {
    /// Content hash identifying this dataset, used to key cached statistics.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub fn paper_counts(full: &LabeledImageSet, profile: Profile) -> Result<Vec<usize>> {
    match profile {
        Profile::Full => Ok(full.per_class_counts().to_vec()),
        Profile::Partial => Ok(vec![PAPER_PARTIAL_PER_CLASS; full.num_classes()]),
        Profile::Imbalanced => build_longtail_counts(&cifar_like(full, PAPER_IMBALANCED_MAX)?),
    }
}

pub fn desk_counts(full: &LabeledImageSet, profile: Profile) -> Result<Vec<usize>> {
    match profile {
        Profile::Full | Profile::Partial => Ok(vec![DESK_PER_CLASS; full.num_classes()]),
        Profile::Imbalanced => build_longtail_counts(&cifar_like(full, DESK_IMBALANCED_MAX)?),
    }
}

fn cifar_like(full: &LabeledImageSet, n_max: usize) -> Result<LongTailSpec> {
    let c = full.num_classes();
    let permutation = if c == 10 {
        CIFAR10_LONGTAIL_PERMUTATION.to_vec()
    } else {
        (0..c).collect()
    };
    Ok(LongTailSpec {
        n_max,
        imbalance_factor: IMBALANCE_FACTOR,
        num_classes: c,
        class_permutation: permutation,
        seed: 0,
    })
}

/// Build a dataset from the full training partition. Returns the selected
/// indices (into `full`) and the manifest.
pub fn build_dataset(full: &LabeledImageSet, request: &DatasetRequest, seed: u64) -> Result<(Vec<usize>, DatasetManifest)> {
    let (name, indices) = match request {
        DatasetRequest::Profile { profile, scale } => {
            let paper = select_subset_indices(full, &paper_counts(full, *profile)?, seed::derive(seed, &[0]))?;
            match scale {
                Scale::Paper => (profile.name().to_string(), paper),
                Scale::Desk => {
                    let inner = full.select(&paper)?;
                    let picked = select_subset_indices(&inner, &desk_counts(full, *profile)?, seed::derive(seed, &[1]))?;
                    (format!("{}-desk", profile.name()), picked.into_iter().map(|i| paper[i]).collect())
                }
            }
        }
        DatasetRequest::Custom(spec) => {
            if spec.num_classes != full.num_classes() {
                return Err(Error::Config(format!(
                    "spec has {} classes, source has {}",
                    spec.num_classes,
                    full.num_classes()
                )));
            }
            let counts = build_longtail_counts(spec)?;
            ("custom".to_string(), select_subset_indices(full, &counts, seed::derive(seed, &[0, spec.seed]))?)
        }
    };
    let mut counts = vec![0usize; full.num_classes()];
    for &i in &indices {
        counts[full.labels()[i] as usize] += 1;
    }
    let manifest = DatasetManifest {
        name,
        request: request.clone(),
        seed,
        class_names: full.class_names().to_vec(),
        total: indices.len(),
        counts,
        source_images: full.len(),
        indices_sha256: index_digest(&indices),
    };
    Ok((indices, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_counts() {
        let identity = LongTailSpec {
            class_permutation: (0..10).collect(),
            ..LongTailSpec::cifar10(4500, 100.0)
        };
        let c = build_longtail_counts(&identity).unwrap();
        assert_eq!(c, vec![4500, 2697, 1617, 969, 581, 348, 208, 125, 75, 45]);
        assert_eq!(c.iter().sum::<usize>(), 11_165);
        let c = build_longtail_counts(&LongTailSpec::cifar10(4500, 100.0)).unwrap();
        assert_eq!(c, vec![348, 969, 125, 208, 1617, 75, 4500, 581, 2697, 45]);
        let c = build_longtail_counts(&LongTailSpec::cifar10(1116, 1.0)).unwrap();
        assert_eq!(c, vec![1116; 10]);
        let two = LongTailSpec {
            n_max: 100,
            imbalance_factor: 4.0,
            num_classes: 2,
            class_permutation: vec![0, 1],
            seed: 0,
        };
        assert_eq!(build_longtail_counts(&two).unwrap(), vec![100, 25]);
        let desk = build_longtail_counts(&LongTailSpec {
            class_permutation: (0..10).collect(),
            ..LongTailSpec::cifar10(403, 100.0)
        })
        .unwrap();
        assert_eq!(desk, vec![403, 241, 144, 86, 52, 31, 18, 11, 6, 4]);
        assert_eq!(desk.iter().sum::<usize>(), 996);
    }

    #[test]
    fn degenerate_and_invalid_specs() {
        let zero = LongTailSpec::cifar10(50, 100.0);
        assert!(matches!(build_longtail_counts(&zero), Err(Error::DegenerateSpec(_))));
        let mut bad = LongTailSpec::cifar10(4500, 100.0);
        bad.class_permutation[0] = 9;
        assert!(matches!(build_longtail_counts(&bad), Err(Error::Config(_))));
        assert!(build_longtail_counts(&LongTailSpec::cifar10(10, 0.5)).is_err());
    }
}
