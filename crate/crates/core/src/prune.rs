//! Magnitude pruning masks and the pruned ("self-competitor") branch.
//!
//! The pruned branch shares its parameters with the dense encoder: a mask is
//! applied to the bound parameter leaves, so the dense tensors are never
//! modified and gradients reach them through both branches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::losses::{ntxent_node, LossValue, Temperature};
use crate::models::{Binding, DiscriminatorSpec, Mode, NormStats, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// One magnitude ranking across all in-scope tensors.
    #[default]
    Global,
    /// Each tensor loses `ratio` of its own weights.
    PerTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamageConfig {
    pub prune_ratio: f64,
    pub refresh_every_epochs: u64,
    #[serde(default)]
    pub ranking: Ranking,
    /// Prunable tensor names; empty means every encoder convolution and
    /// linear weight.
    #[serde(default)]
    pub scope: Vec<String>,
}

impl Default for DamageConfig {
    fn default() -> Self {
        DamageConfig {
            prune_ratio: 0.3,
            refresh_every_epochs: 1,
            ranking: Ranking::Global,
            scope: Vec::new(),
        }
    }
}

impl DamageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_ratio > 0.0 && self.prune_ratio < 1.0) {
            return Err(Error::Config(format!("prune_ratio {} outside (0, 1)", self.prune_ratio)));
        }
        if self.refresh_every_epochs == 0 {
            return Err(Error::Config("refresh_every_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// A binary mask with the shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        }
    }

    pub fn from_keep(shape: &[usize], keep: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != keep.len() {
            return Err(Error::Shape(format!("mask of {} entries for shape {shape:?}", keep.len())));
        }
        Ok(Mask {
            shape: shape.to_vec(),
            keep,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn zeros(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(&self.shape, data).expect("mask shape")
    }

    /// Bits packed little-endian within each byte.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.keep.len().div_ceil(8)];
        for (i, &k) in self.keep.iter().enumerate() {
            if k {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Checkpoint(format!("packed mask of {} bytes for {n} entries", bytes.len())));
        }
        let keep = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Mask {
            shape: shape.to_vec(),
            keep,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    masks: BTreeMap<String, Mask>,
    pub ratio: f64,
    pub created_at_epoch: u64,
}

impl PruneMask {
    pub fn new(masks: BTreeMap<String, Mask>, ratio: f64, created_at_epoch: u64) -> Self {
        PruneMask {
            masks,
            ratio,
            created_at_epoch,
        }
    }

    /// All-ones masks over the named tensors of `params`.
    pub fn all_ones<T: Scalar>(params: &ParamSet<T>, names: &[String]) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for n in names {
            masks.insert(n.clone(), Mask::ones(params.tensor(n)?.shape()));
        }
        Ok(PruneMask::new(masks, 0.0, 0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mask)> {
        self.masks.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Mask> {
        self.masks.get(name)
    }

    pub fn total(&self) -> usize {
        self.masks.values().map(|m| m.keep.len()).sum()
    }

    pub fn zeros(&self) -> usize {
        self.masks.values().map(Mask::zeros).sum()
    }

    pub fn sparsity(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.zeros() as f64 / t as f64
        }
    }
}

/// Mask the `floor(ratio * total)` smallest-magnitude weights among
/// `names`. Ties are broken by tensor name, then flat index, both ascending.
pub fn compute_prune_masks<T: Scalar>(
    params: &ParamSet<T>,
    names: &[String],
    ratio: f64,
    ranking: Ranking,
    epoch: u64,
) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("prune ratio {ratio} outside [0, 1)")));
    }
    if names.is_empty() {
        return Err(Error::Contract("no tensors in pruning scope".into()));
    }
    let mut sorted: Vec<&String> = names.iter().collect();
    sorted.sort();
    sorted.dedup();
    let tensors: Vec<&Tensor<T>> = sorted.iter().map(|n| params.tensor(n)).collect::<Result<_>>()?;
    let mut keep: Vec<Vec<bool>> = tensors.iter().map(|t| vec![true; t.numel()]).collect();

    // (|w|, tensor rank in name order, flat index): a strict total order.
    let mut prune = |entries: &mut Vec<(f64, usize, usize)>, k: usize| {
        if k == 0 {
            return;
        }
        let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if k < entries.len() {
            entries.select_nth_unstable_by(k - 1, cmp);
        }
        for &(_, t, i) in &entries[..k] {
            keep[t][i] = false;
        }
    };
    let magnitudes = |t: usize| -> Vec<(f64, usize, usize)> {
        tensors[t]
            .data()
            .iter()
            .enumerate()
            .map(|(i, w)| (w.to_f64_lossy().abs(), t, i))
            .collect()
    };
    match ranking {
        Ranking::Global => {
            let mut all: Vec<_> = (0..tensors.len()).flat_map(magnitudes).collect();
            let k = (ratio * all.len() as f64).floor() as usize;
            prune(&mut all, k);
        }
        Ranking::PerTensor => {
            for t in 0..tensors.len() {
                let mut e = magnitudes(t);
                let k = (ratio * e.len() as f64).floor() as usize;
                prune(&mut e, k);
            }
        }
    }

    let mut masks = BTreeMap::new();
    for ((name, t), k) in sorted.iter().zip(&tensors).zip(keep) {
        if !k.is_empty() && k.iter().all(|&x| !x) {
            log::warn!("pruning removed every weight of {name}");
        }
        masks.insert((*name).clone(), Mask::from_keep(t.shape(), k)?);
    }
    Ok(PruneMask::new(masks, ratio, epoch))
}

/// True at epochs where the mask is recomputed.
pub fn should_refresh(epoch: u64, config: &DamageConfig) -> bool {
    epoch % config.refresh_every_epochs.max(1) == 0
}

/// Encoder forward with every masked tensor multiplied by its mask.
pub fn pruned_forward<T: Scalar>(
    spec: &DiscriminatorSpec,
    binding: &Binding<'_, T>,
    mask: &PruneMask,
    x: Var,
    mode: Mode,
    stats: &mut NormStats<T>,
) -> Result<Var> {
    let masked = binding.masked(mask)?;
    spec.encode(&masked, x, mode, stats)
}

/// Dense-versus-pruned contrast of two real views: the first view through
/// the dense encoder, the second through the pruned branch, both projected
/// by the real-view head.
pub fn damage_real_loss<T: Scalar>(
    spec: &DiscriminatorSpec,
    binding: &Binding<'_, T>,
    mask: &PruneMask,
    view1: Var,
    view2: Var,
    tau: Temperature<T>,
) -> Result<(Var, LossValue<T>)> {
    let g = binding.graph();
    if g.value(view1).shape() != g.value(view2).shape() {
        return Err(Error::Shape("views differ in shape".into()));
    }
    let mut stats = Vec::new();
    let h1 = spec.encode(binding, view1, Mode::Train, &mut stats)?;
    let h2 = pruned_forward(spec, binding, mask, view2, Mode::Train, &mut stats)?;
    let z1 = spec.project_real(binding, h1)?;
    let z2 = spec.project_real(binding, h2)?;
    ntxent_node(g, z1, z2, tau)
}
