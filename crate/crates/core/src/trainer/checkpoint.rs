//! Training checkpoints in the shared container format.
//!
//! Blobs: `gen/<param>`, `disc/<param>`, `opt/gen/{m,v}/<param>`,
//! `opt/disc/{m,v}/<param>` and, for the damage variant, `mask/<param>`
//! (bit-packed). The metadata records the step, epoch, optimizer counters,
//! mask bookkeeping, parameter checksums and the full configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig, TrainState, Trainer};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::prune::{Mask, PruneMask};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub dtype: String,
    pub step: u64,
    pub epoch: u64,
    pub gen_opt_t: u64,
    pub disc_opt_t: u64,
    pub mask_ratio: Option<f64>,
    pub mask_epoch: Option<u64>,
    pub gen_sha256: String,
    pub disc_sha256: String,
    pub config: TrainConfig,
}

const FORMAT: &str = "dgan-train-state";

fn put_params<T: Scalar>(c: &mut Container, prefix: &str, ps: &ParamSet<T>) -> Result<()> {
    for (name, p) in ps.iter() {
        c.put_tensor(&format!("{prefix}/{name}"), &p.value)?;
    }
    Ok(())
}

fn put_opt<T: Scalar>(c: &mut Container, prefix: &str, opt: &Adam<T>) -> Result<()> {
    for (name, m) in &opt.m {
        c.put_tensor(&format!("{prefix}/m/{name}"), m)?;
    }
    for (name, v) in &opt.v {
        c.put_tensor(&format!("{prefix}/v/{name}"), v)?;
    }
    Ok(())
}

pub fn to_container<T: Scalar>(state: &TrainState<T>, cfg: &TrainConfig) -> Result<Container> {
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        dtype: T::DTYPE.into(),
        step: state.step,
        epoch: state.epoch,
        gen_opt_t: state.gen_opt.t,
        disc_opt_t: state.disc_opt.t,
        mask_ratio: state.mask.as_ref().map(|m| m.ratio),
        mask_epoch: state.mask.as_ref().map(|m| m.created_at_epoch),
        gen_sha256: state.gen.checksum(),
        disc_sha256: state.disc.checksum(),
        config: cfg.clone(),
    };
    let mut c = Container::new(serde_json::to_value(meta).map_err(|e| Error::json("checkpoint meta", e))?);
    put_params(&mut c, "gen", &state.gen)?;
    put_params(&mut c, "disc", &state.disc)?;
    put_opt(&mut c, "opt/gen", &state.gen_opt)?;
    put_opt(&mut c, "opt/disc", &state.disc_opt)?;
    if let Some(mask) = &state.mask {
        for (name, m) in mask.iter() {
            c.put_bits(&format!("mask/{name}"), m.shape(), m.pack())?;
        }
    }
    Ok(c)
}

pub fn save<T: Scalar>(state: &TrainState<T>, cfg: &TrainConfig, path: &Path) -> Result<()> {
    to_container(state, cfg)?.write(path)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    meta_of(&Container::read(path)?)
}

fn meta_of(c: &Container) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::json("checkpoint meta", e))?;
    if meta.format != FORMAT {
        return Err(Error::Checkpoint(format!("not a training checkpoint (format `{}`)", meta.format)));
    }
    Ok(meta)
}

fn fill<T: Scalar>(c: &Container, prefix: &str, ps: &mut ParamSet<T>) -> Result<()> {
    for (name, p) in ps.iter_mut() {
        let t = c.tensor::<T>(&format!("{prefix}/{name}"))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!("{prefix}/{name} has shape {:?}", t.shape())));
        }
        p.value = t;
    }
    Ok(())
}

fn fill_opt<T: Scalar>(c: &Container, prefix: &str, opt: &mut Adam<T>, t: u64) -> Result<()> {
    for (which, map) in [("m", &mut opt.m), ("v", &mut opt.v)] {
        for (name, value) in map.iter_mut() {
            *value = c.tensor::<T>(&format!("{prefix}/{which}/{name}"))?;
        }
    }
    opt.t = t;
    Ok(())
}

/// Restore a state; the parameter layout comes from `trainer`'s specs and
/// the stored checksums are verified.
pub fn from_container<T: Scalar>(c: &Container, trainer: &Trainer<T>) -> Result<(TrainState<T>, CheckpointMeta)> {
    let meta = meta_of(c)?;
    let mut state = trainer.init_state()?;
    fill(c, "gen", &mut state.gen)?;
    fill(c, "disc", &mut state.disc)?;
    fill_opt(c, "opt/gen", &mut state.gen_opt, meta.gen_opt_t)?;
    fill_opt(c, "opt/disc", &mut state.disc_opt, meta.disc_opt_t)?;
    if meta.dtype == T::DTYPE {
        if state.gen.checksum() != meta.gen_sha256 || state.disc.checksum() != meta.disc_sha256 {
            return Err(Error::Checkpoint("parameter checksum mismatch".into()));
        }
    }
    state.step = meta.step;
    state.epoch = meta.epoch;
    if let (Some(ratio), Some(epoch)) = (meta.mask_ratio, meta.mask_epoch) {
        let mut masks = BTreeMap::new();
        for e in c.entries().filter(|e| e.name.starts_with("mask/")) {
            let name = e.name["mask/".len()..].to_string();
            let (shape, bits) = c.bits(&e.name)?;
            masks.insert(name, Mask::unpack(&shape, bits)?);
        }
        state.mask = Some(PruneMask::new(masks, ratio, epoch));
    }
    Ok((state, meta))
}

pub fn load<T: Scalar>(path: &Path, trainer: &Trainer<T>) -> Result<(TrainState<T>, CheckpointMeta)> {
    from_container(&Container::read(path)?, trainer)
}

/// Generator parameters only, for sampling and evaluation.
pub fn load_generator<T: Scalar>(path: &Path) -> Result<(ParamSet<T>, CheckpointMeta)> {
    let c = Container::read(path)?;
    let meta = meta_of(&c)?;
    let mut gen = meta.config.generator.init::<T>(0)?;
    fill(&c, "gen", &mut gen)?;
    Ok((gen, meta))
}

/// Discriminator parameters only.
pub fn load_discriminator<T: Scalar>(path: &Path) -> Result<(ParamSet<T>, CheckpointMeta)> {
    let c = Container::read(path)?;
    let meta = meta_of(&c)?;
    let mut disc = meta.config.discriminator_spec().init::<T>(0)?;
    fill(&c, "disc", &mut disc)?;
    Ok((disc, meta))
}
