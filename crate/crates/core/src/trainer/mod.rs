//! Adversarial training of the three variants.
//!
//! A step is `d_steps_per_g_step` discriminator updates, each on its own
//! real batch, followed by one generator update. Steps are numbered from 1;
//! the checkpoint `step-N` holds the state after N steps.
//!
//! Random streams (all derived from the run seed):
//!
//! * initialization: `(seed, [Init, 0])` generator, `(seed, [Init, 1])` discriminator
//! * data order of epoch e: `(seed, [Train, e, u64::MAX])`
//! * latent batch: `(seed, [Train, step, d_iter, role])`, role 0 for a
//!   discriminator update and 1 for the generator update
//! * augmentation: view keys `[epoch, batch_index, j, view]` under the root
//!   `(seed, [Augment])`; views 0 and 1 for real images, 2 for fakes in a
//!   discriminator update, 3 for fakes in the generator update

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod run;

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use config::{EvalConfig, ExtractorKind, OptimizerConfig, Precision, TrainConfig, Variant};

use crate::autograd::{Graph, Gradients, Var};
use crate::data::augment::{apply_batch, sample_views, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::losses::{bce_d_node, bce_g_node, d_head_loss_node, g_loss_node, ntxent_node, supcon_fake_node, Temperature};
use crate::models::{Binding, Layer, DiscriminatorSpec, GeneratorSpec, Mode, NormStats, ParamSet};
use crate::prune::{compute_prune_masks, pruned_forward, PruneMask};
use crate::scalar::Scalar;
use crate::seed::{self, Substream};
use crate::tensor::Tensor;

/// Position of a real batch in the data stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchKey {
    pub epoch: u64,
    pub batch_index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub gen: ParamSet<T>,
    pub disc: ParamSet<T>,
    pub gen_opt: Adam<T>,
    pub disc_opt: Adam<T>,
    /// Damage variant only.
    pub mask: Option<PruneMask>,
    /// Completed steps.
    pub step: u64,
    /// Epoch of the most recent real batch.
    pub epoch: u64,
}

/// Loss values of one step, in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub values: Vec<(String, f64)>,
}

impl StepLosses {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Resolved model specs and policies for one configuration.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub gen_spec: GeneratorSpec,
    pub disc_spec: DiscriminatorSpec,
    pub policy: AugmentationPolicy,
    pub prunable: Vec<String>,
    tau: Temperature<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let disc_spec = cfg.discriminator_spec();
        let mut policy = cfg.augmentation.clone();
        policy.seed_root = seed::substream(cfg.seed, Substream::Augment);
        let prunable = match cfg.damage_config() {
            Some(d) if !d.scope.is_empty() => d.scope.clone(),
            _ => disc_spec.encoder.prunable(),
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            gen_spec: cfg.generator.clone(),
            disc_spec,
            policy,
            prunable,
            tau: Temperature::new(T::from_f64_lossy(cfg.tau))?,
        })
    }

    pub fn init_state(&self) -> Result<TrainState<T>> {
        let gen = self.gen_spec.init(seed::derive(self.cfg.seed, &[Substream::Init as u64, 0]))?;
        let disc = self.disc_spec.init(seed::derive(self.cfg.seed, &[Substream::Init as u64, 1]))?;
        Ok(TrainState {
            gen_opt: Adam::new(&gen),
            disc_opt: Adam::new(&disc),
            gen,
            disc,
            mask: None,
            step: 0,
            epoch: 0,
        })
    }

    /// Recompute the damage mask from the current discriminator weights.
    pub fn refresh_mask(&self, state: &mut TrainState<T>, epoch: u64) -> Result<()> {
        if let Some(d) = self.cfg.damage_config() {
            state.mask = Some(compute_prune_masks(&state.disc, &self.prunable, d.prune_ratio, d.ranking, epoch)?);
        }
        Ok(())
    }

    fn latent(&self, step: u64, d_iter: u64, role: u64, n: usize) -> Result<Tensor<T>> {
        let mut rng = seed::rng(self.cfg.seed, &[Substream::Train as u64, step, d_iter, role]);
        let dim = self.gen_spec.latent_dim;
        let z = (0..n * dim).map(|_| T::from_f64_lossy(StandardNormal.sample(&mut rng))).collect();
        Tensor::from_vec(&[n, dim], z)
    }

    fn views(&self, key: BatchKey, n: usize, view: u64) -> Vec<crate::data::augment::ViewParams> {
        sample_views(&self.policy, n, key.epoch, key.batch_index, view, 32, 32)
    }

    /// Generated images for a discriminator update (no gradient, batch
    /// statistics, running estimates untouched).
    fn fakes_for_d(&self, gen: &ParamSet<T>, step: u64, d_iter: u64, n: usize) -> Result<Tensor<T>> {
        let g = Graph::new();
        let b = Binding::new(&g, gen, false);
        let z = g.constant(self.latent(step, d_iter, 0, n)?);
        let x = self.gen_spec.forward(&b, z, Mode::Train, &mut NormStats::new())?;
        let out = g.value(x).clone();
        Ok(out)
    }

    /// One discriminator update on `real`. Only discriminator tensors change.
    pub fn d_step(&self, state: &mut TrainState<T>, real: &Tensor<T>, key: BatchKey, d_iter: u64) -> Result<Vec<(String, f64)>> {
        let step = state.step + 1;
        let n = real.dim(0);
        let fake = self.fakes_for_d(&state.gen, step, d_iter, n)?;
        let g = Graph::new();
        let b = Binding::new(&g, &state.disc, true);
        let spec = &self.disc_spec;
        let mut stats = NormStats::new();
        let (total, values) = match self.cfg.variant {
            Variant::Dcgan => {
                let hr = spec.encode(&b, g.constant(real.clone()), Mode::Train, &mut stats)?;
                let hf = spec.encode(&b, g.constant(fake), Mode::Train, &mut NormStats::new())?;
                let (sr, sf) = (spec.score_real_fake(&b, hr)?, spec.score_real_fake(&b, hf)?);
                let (l, v) = bce_d_node(&g, sr, sf)?;
                (l, vec![("d_bce".to_string(), v.value.to_f64_lossy())])
            }
            Variant::Contrad | Variant::Damage => {
                let v1 = g.constant(apply_batch(real, &self.views(key, n, 0))?);
                let v2 = g.constant(apply_batch(real, &self.views(key, n, 1))?);
                let xf = g.constant(apply_batch(&fake, &self.views(key, n, 2))?);
                let h1 = spec.encode(&b, v1, Mode::Train, &mut stats)?;
                let h2 = spec.encode(&b, v2, Mode::Train, &mut stats)?;
                let hf = spec.encode(&b, xf, Mode::Train, &mut stats)?;
                let z1 = spec.project_real(&b, h1)?;
                let z2 = match (self.cfg.variant, &state.mask) {
                    (Variant::Damage, Some(mask)) => {
                        let hp = pruned_forward(spec, &b, mask, v2, Mode::Train, &mut NormStats::new())?;
                        spec.project_real(&b, hp)?
                    }
                    (Variant::Damage, None) => return Err(Error::Contract("damage step without a prune mask".into())),
                    _ => spec.project_real(&b, h2)?,
                };
                let (l_real, v_real) = ntxent_node(&g, z1, z2, self.tau)?;
                let head_in = |h: Var| if self.cfg.detach_heads { g.detach(h) } else { h };
                let pf = spec.project_fake(&b, head_in(hf))?;
                let p1 = spec.project_fake(&b, head_in(h1))?;
                let p2 = spec.project_fake(&b, head_in(h2))?;
                let (l_con, v_con) = supcon_fake_node(&g, pf, p1, p2, self.tau)?;
                let sr = spec.score_real_fake(&b, head_in(h1))?;
                let sf = spec.score_real_fake(&b, head_in(hf))?;
                let (l_dis, v_dis) = d_head_loss_node(&g, sr, sf)?;
                let (lc, ld) = (T::from_f64_lossy(self.cfg.lambda_con), T::from_f64_lossy(self.cfg.lambda_dis));
                let total = g.weighted_sum(&[(l_real, T::one()), (l_con, lc), (l_dis, ld)]);
                let values = vec![
                    ("real_contrast".to_string(), v_real.value.to_f64_lossy()),
                    ("supcon_fake".to_string(), v_con.value.to_f64_lossy()),
                    ("d_hinge".to_string(), v_dis.value.to_f64_lossy()),
                    ("d_total".to_string(), g.item(total).to_f64_lossy()),
                ];
                (total, values)
            }
        };
        check_finite(step, &values)?;
        let grads = g.backward(total)?;
        let grads = collect(&b, &grads);
        state.disc_opt.step(&mut state.disc, &grads, &self.cfg.optimizer)?;
        if self.disc_spec.encoder.batch_norm {
            // Running estimates follow the first real pass only.
            let layers = self.disc_spec.encoder.layers();
            let norms = layers.iter().filter(|l| matches!(l, Layer::BatchNorm { .. })).count();
            let first: NormStats<T> = stats.into_iter().take(norms).collect();
            state.disc.absorb_stats(&first)?;
        }
        if !state.disc.all_finite() {
            return Err(Error::Diverged {
                step,
                loss: "discriminator parameters".into(),
            });
        }
        Ok(values)
    }

    /// One generator update. Only generator tensors change.
    pub fn g_step(&self, state: &mut TrainState<T>, key: BatchKey) -> Result<Vec<(String, f64)>> {
        let step = state.step + 1;
        let n = self.cfg.batch_size;
        let g = Graph::new();
        let bg = Binding::new(&g, &state.gen, true);
        let bd = Binding::new(&g, &state.disc, false);
        let z = g.constant(self.latent(step, 0, 1, n)?);
        let mut gen_stats = NormStats::new();
        let x = self.gen_spec.forward(&bg, z, Mode::Train, &mut gen_stats)?;
        let spec = &self.disc_spec;
        let (loss, name, value) = match self.cfg.variant {
            Variant::Dcgan => {
                let h = spec.encode(&bd, x, Mode::Train, &mut NormStats::new())?;
                let (l, v) = bce_g_node(&g, spec.score_real_fake(&bd, h)?)?;
                (l, "g_bce", v.value)
            }
            Variant::Contrad | Variant::Damage => {
                let xa = g.augment(x, self.views(key, n, 3))?;
                let h = spec.encode(&bd, xa, Mode::Train, &mut NormStats::new())?;
                let (l, v) = g_loss_node(&g, spec.score_real_fake(&bd, h)?)?;
                (l, "g_hinge", v.value)
            }
        };
        let values = vec![(name.to_string(), value.to_f64_lossy())];
        check_finite(step, &values)?;
        let grads = g.backward(loss)?;
        let grads = collect(&bg, &grads);
        state.gen_opt.step(&mut state.gen, &grads, &self.cfg.optimizer)?;
        state.gen.absorb_stats(&gen_stats)?;
        if !state.gen.all_finite() {
            return Err(Error::Diverged {
                step,
                loss: "generator parameters".into(),
            });
        }
        Ok(values)
    }

    /// One full step: a discriminator update per real batch, then one
    /// generator update. Discriminator losses are averaged over updates.
    pub fn train_step(&self, state: &mut TrainState<T>, batches: &[(Tensor<T>, BatchKey)]) -> Result<StepLosses> {
        if batches.len() != self.cfg.d_steps_per_g_step {
            return Err(Error::Contract(format!(
                "{} real batches for {} discriminator updates",
                batches.len(),
                self.cfg.d_steps_per_g_step
            )));
        }
        let mut sums: Vec<(String, f64)> = Vec::new();
        for (i, (real, key)) in batches.iter().enumerate() {
            if real.dim(0) != self.cfg.batch_size {
                return Err(Error::InsufficientBatch(format!(
                    "real batch of {} images, batch_size is {}",
                    real.dim(0),
                    self.cfg.batch_size
                )));
            }
            let v = self.d_step(state, real, *key, i as u64)?;
            if sums.is_empty() {
                sums = v.into_iter().map(|(n, x)| (n, 0.0 + x)).collect();
            } else {
                sums.iter_mut().zip(v).for_each(|(s, (_, x))| s.1 += x);
            }
        }
        let k = batches.len() as f64;
        let mut values: Vec<(String, f64)> = sums.into_iter().map(|(n, s)| (n, s / k)).collect();
        values.extend(self.g_step(state, batches[batches.len() - 1].1)?);
        state.step += 1;
        Ok(StepLosses {
            step: state.step,
            values,
        })
    }
}

fn check_finite(step: u64, values: &[(String, f64)]) -> Result<()> {
    match values.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::Diverged {
            step,
            loss: name.clone(),
        }),
        None => Ok(()),
    }
}

fn collect<T: Scalar>(b: &Binding<'_, T>, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
    b.vars()
        .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
        .collect()
}

/// `n` generator samples in inference mode. Latents are drawn in one
/// sequence from `(seed, [])`, so the result does not depend on `chunk`.
pub fn sample<T: Scalar>(spec: &GeneratorSpec, params: &ParamSet<T>, n: usize, seed: u64, chunk: usize) -> Result<Tensor<T>> {
    if n == 0 || chunk == 0 {
        return Err(Error::Contract("sampling needs n >= 1 and chunk >= 1".into()));
    }
    let mut rng = seed::rng(seed, &[]);
    let dim = spec.latent_dim;
    let z: Vec<T> = (0..n * dim).map(|_| T::from_f64_lossy(StandardNormal.sample(&mut rng))).collect();
    let z = Tensor::from_vec(&[n, dim], z)?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let g = Graph::new();
        let b = Binding::new(&g, params, false);
        let zv = g.constant(z.slice_outer(start, end));
        let x = spec.forward(&b, zv, Mode::Eval, &mut NormStats::new())?;
        parts.push(g.value(x).clone());
        start = end;
    }
    Tensor::cat_outer(&parts.iter().collect::<Vec<_>>())
}
