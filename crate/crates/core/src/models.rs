//! Generator, discriminator encoder and the three discriminator heads.
//!
//! Parameters live in a [`ParamSet`], a name-ordered map of tensors. A
//! forward pass first binds a parameter set into a [`Graph`] (a
//! [`Binding`]), then walks the layer list of the relevant spec. Every
//! network is described by a plain serializable spec, so parameter counts
//! and layer structure are functions of the spec alone.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{BatchStats, Graph, NormMode, Var};
use crate::error::{Error, Result};
use crate::prune::PruneMask;
use crate::scalar::{lit, Scalar};
use crate::seed;
use crate::tensor::conv::ConvGeom;
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 100;
pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

pub const GEN: &str = "gen";
pub const ENC: &str = "enc";
pub const PROJ_REAL: &str = "proj_real";
pub const PROJ_FAKE: &str = "proj_fake";
pub const SCORE: &str = "score";

const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named tensors of one network (or of several, distinguished by prefix).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) {
        self.params.insert(name.into(), Param { kind, value });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Merge another set in; names must not collide.
    pub fn extend(&mut self, other: ParamSet<T>) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::Contract(format!("duplicate parameter {name}")));
            }
            self.params.insert(name, p);
        }
        Ok(())
    }

    /// Subset whose names start with `prefix.`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet<T> {
        let dotted = format!("{prefix}.");
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(&dotted))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    /// sha256 over names, kinds, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            h.update([p.kind as u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            kind: p.kind,
                            value: p.value.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.all_finite())
    }

    /// Fold batch statistics observed in training mode into the running
    /// estimates (exponential average with momentum 0.1).
    pub fn absorb_stats(&mut self, stats: &NormStats<T>) -> Result<()> {
        let m: T = lit(BN_MOMENTUM);
        for (layer, s) in stats {
            for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var_unbiased)] {
                let name = format!("{layer}.{suffix}");
                let p = self
                    .params
                    .get_mut(&name)
                    .ok_or_else(|| Error::Contract(format!("missing buffer {name}")))?;
                for (r, &v) in p.value.data_mut().iter_mut().zip(values.iter()) {
                    *r = (T::one() - m) * *r + m * v;
                }
            }
        }
        Ok(())
    }
}

/// Batch statistics collected during one training-mode forward pass, keyed
/// by normalization layer name.
pub type NormStats<T> = Vec<(String, BatchStats<T>)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; observed statistics are reported for running updates.
    Train,
    /// Running statistics; per-sample independent.
    Eval,
}

/// A parameter set bound into a graph.
pub struct Binding<'g, T: Scalar> {
    graph: &'g Graph<T>,
    vars: BTreeMap<String, Var>,
    running: BTreeMap<String, Vec<T>>,
}

impl<'g, T: Scalar> Binding<'g, T> {
    /// Trainable tensors become gradient leaves when `trainable`, constants
    /// otherwise. Running statistics are kept outside the graph.
    pub fn new(graph: &'g Graph<T>, params: &ParamSet<T>, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        let mut running = BTreeMap::new();
        for (name, p) in params.iter() {
            if p.kind.trainable() {
                vars.insert(name.clone(), graph.leaf(p.value.clone(), trainable));
            } else {
                running.insert(name.clone(), p.value.data().to_vec());
            }
        }
        Binding { graph, vars, running }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// A view of this binding in which every masked tensor is replaced by its
    /// elementwise product with the mask. The underlying leaves are shared,
    /// so gradients of the masked view flow to the dense parameters.
    pub fn masked(&self, mask: &PruneMask) -> Result<Binding<'g, T>> {
        let mut vars = self.vars.clone();
        for (name, m) in mask.iter() {
            let v = self.var(name)?;
            let shape = self.graph.value(v).shape().to_vec();
            if shape != m.shape() {
                return Err(Error::Contract(format!(
                    "mask for {name} has shape {:?}, parameter has {:?}",
                    m.shape(),
                    shape
                )));
            }
            vars.insert(name.clone(), self.graph.mask_mul(v, m.to_tensor())?);
        }
        Ok(Binding {
            graph: self.graph,
            vars,
            running: self.running.clone(),
        })
    }

    fn norm(&self, layer: &str, x: Var, mode: Mode, eps: T, stats: &mut NormStats<T>) -> Result<Var> {
        let gamma = self.var(&format!("{layer}.weight"))?;
        let beta = self.var(&format!("{layer}.bias"))?;
        match mode {
            Mode::Train => {
                let (y, s) = self.graph.batch_norm(x, gamma, beta, NormMode::Batch { eps })?;
                if let Some(s) = s {
                    stats.push((layer.to_string(), s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let get = |suffix: &str| {
                    let name = format!("{layer}.{suffix}");
                    self.running
                        .get(&name)
                        .ok_or_else(|| Error::Contract(format!("missing buffer {name}")))
                };
                let (mean, var) = (get("running_mean")?, get("running_var")?);
                Ok(self
                    .graph
                    .batch_norm(x, gamma, beta, NormMode::Running { mean, var, eps })?
                    .0)
            }
        }
    }
}

/// Coarse layer description used for structural checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { name: String, cin: usize, cout: usize, stride: usize },
    ConvTranspose { name: String, cin: usize, cout: usize, stride: usize },
    Linear { name: String, din: usize, dout: usize },
    BatchNorm { name: String, channels: usize },
    Relu,
    LeakyRelu,
    Tanh,
    Flatten,
    RowNormalize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    pub base_channels: usize,
    #[serde(default = "default_stages")]
    pub num_upsample_stages: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_latent() -> usize {
    LATENT_DIM
}
fn default_stages() -> usize {
    3
}
fn default_eps() -> f64 {
    1e-5
}
fn default_slope() -> f64 {
    0.2
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            latent_dim: LATENT_DIM,
            base_channels: 64,
            num_upsample_stages: 3,
            norm_eps: 1e-5,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim != LATENT_DIM {
            return Err(Error::Config(format!("latent_dim must be {LATENT_DIM}, got {}", self.latent_dim)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("generator base_channels must be positive".into()));
        }
        if self.num_upsample_stages == 0 || 4usize << self.num_upsample_stages != IMAGE_SIZE {
            return Err(Error::Config(format!(
                "num_upsample_stages {} does not reach {IMAGE_SIZE}x{IMAGE_SIZE}",
                self.num_upsample_stages
            )));
        }
        Ok(())
    }

    /// Hidden widths, widest first.
    fn widths(&self) -> Vec<usize> {
        let n = self.num_upsample_stages;
        (0..n).map(|i| self.base_channels << (n - 1 - i)).collect()
    }

    pub fn layers(&self) -> Vec<Layer> {
        let w = self.widths();
        let mut out = Vec::new();
        let mut cin = self.latent_dim;
        for (i, &c) in w.iter().enumerate() {
            out.push(Layer::ConvTranspose {
                name: format!("{GEN}.deconv{i}"),
                cin,
                cout: c,
                stride: if i == 0 { 1 } else { 2 },
            });
            out.push(Layer::BatchNorm {
                name: format!("{GEN}.bn{i}"),
                channels: c,
            });
            out.push(Layer::Relu);
            cin = c;
        }
        out.push(Layer::ConvTranspose {
            name: format!("{GEN}.deconv{}", w.len()),
            cin,
            cout: IMAGE_CHANNELS,
            stride: 2,
        });
        out.push(Layer::Tanh);
        out
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut ps = ParamSet::new();
        let w = self.widths();
        for layer in self.layers() {
            match layer {
                Layer::ConvTranspose { name, cin, cout, .. } => {
                    ps.insert(format!("{name}.weight"), ParamKind::Weight, normal(seed, &name, &[cin, cout, 4, 4], 0.0, 0.02));
                    if cout == IMAGE_CHANNELS && name.ends_with(&format!("deconv{}", w.len())) {
                        ps.insert(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout]));
                    }
                }
                Layer::BatchNorm { name, channels } => insert_norm(&mut ps, seed, &name, channels),
                _ => {}
            }
        }
        Ok(ps)
    }

    /// Generator forward: (B, latent) noise to (B, 3, 32, 32) images in [-1, 1].
    pub fn forward<T: Scalar>(&self, b: &Binding<'_, T>, z: Var, mode: Mode, stats: &mut NormStats<T>) -> Result<Var> {
        let g = b.graph();
        let batch = {
            let zv = g.value(z);
            if zv.rank() != 2 || zv.dim(1) != self.latent_dim {
                return Err(Error::Shape(format!(
                    "latent batch must be (B, {}), got {:?}",
                    self.latent_dim,
                    zv.shape()
                )));
            }
            zv.dim(0)
        };
        let eps: T = lit(self.norm_eps);
        let mut x = g.reshape(z, &[batch, self.latent_dim, 1, 1])?;
        for layer in self.layers() {
            x = match layer {
                Layer::ConvTranspose { name, stride, .. } => {
                    let geom = if stride == 1 { ConvGeom::square(4, 1, 0) } else { ConvGeom::square(4, 2, 1) };
                    let bias = b.var(&format!("{name}.bias")).ok();
                    g.conv_transpose2d(x, b.var(&format!("{name}.weight"))?, bias, geom)?
                }
                Layer::BatchNorm { name, .. } => b.norm(&name, x, mode, eps, stats)?,
                Layer::Relu => g.relu(x),
                Layer::Tanh => g.tanh(x),
                other => return Err(Error::Contract(format!("unexpected generator layer {other:?}"))),
            };
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub base_channels: usize,
    #[serde(default = "default_stages")]
    pub num_stages: usize,
    pub feature_dim: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Batch normalization after every convolution except the first.
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            base_channels: 64,
            num_stages: 3,
            feature_dim: 512,
            leaky_slope: 0.2,
            batch_norm: false,
            norm_eps: 1e-5,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.feature_dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.num_stages == 0 || IMAGE_SIZE >> self.num_stages == 0 {
            return Err(Error::Config(format!("encoder num_stages {} invalid", self.num_stages)));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    fn final_spatial(&self) -> usize {
        IMAGE_SIZE >> self.num_stages
    }

    fn flat_dim(&self) -> usize {
        let s = self.final_spatial();
        (self.base_channels << (self.num_stages - 1)) * s * s
    }

    pub fn layers(&self) -> Vec<Layer> {
        let mut out = Vec::new();
        let mut cin = IMAGE_CHANNELS;
        for i in 0..self.num_stages {
            let c = self.base_channels << i;
            out.push(Layer::Conv {
                name: format!("{ENC}.conv{i}"),
                cin,
                cout: c,
                stride: 2,
            });
            if self.batch_norm && i > 0 {
                out.push(Layer::BatchNorm {
                    name: format!("{ENC}.bn{i}"),
                    channels: c,
                });
            }
            out.push(Layer::LeakyRelu);
            cin = c;
        }
        out.push(Layer::Flatten);
        out.push(Layer::Linear {
            name: format!("{ENC}.fc"),
            din: self.flat_dim(),
            dout: self.feature_dim,
        });
        out.push(Layer::LeakyRelu);
        out
    }

    fn has_norm(&self, conv_index: usize) -> bool {
        self.batch_norm && conv_index > 0
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut ps = ParamSet::new();
        for (idx, layer) in self.layers().into_iter().enumerate() {
            match layer {
                Layer::Conv { name, cin, cout, .. } => {
                    ps.insert(format!("{name}.weight"), ParamKind::Weight, normal(seed, &name, &[cout, cin, 4, 4], 0.0, 0.02));
                    let i: usize = name.trim_start_matches(&format!("{ENC}.conv")).parse().unwrap_or(idx);
                    if !self.has_norm(i) {
                        ps.insert(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout]));
                    }
                }
                Layer::BatchNorm { name, channels } => insert_norm(&mut ps, seed, &name, channels),
                Layer::Linear { name, din, dout } => insert_linear(&mut ps, seed, &name, din, dout),
                _ => {}
            }
        }
        Ok(ps)
    }

    /// Encoder forward: (B, 3, 32, 32) images to (B, feature_dim) features.
    pub fn forward<T: Scalar>(&self, b: &Binding<'_, T>, x: Var, mode: Mode, stats: &mut NormStats<T>) -> Result<Var> {
        let g = b.graph();
        let batch = {
            let xv = g.value(x);
            if xv.rank() != 4 || xv.shape()[1..] != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
                return Err(Error::Shape(format!("encoder expects (B, 3, 32, 32), got {:?}", xv.shape())));
            }
            xv.dim(0)
        };
        let eps: T = lit(self.norm_eps);
        let slope: T = lit(self.leaky_slope);
        let mut h = x;
        for layer in self.layers() {
            h = match layer {
                Layer::Conv { name, .. } => {
                    let bias = b.var(&format!("{name}.bias")).ok();
                    g.conv2d(h, b.var(&format!("{name}.weight"))?, bias, ConvGeom::square(4, 2, 1))?
                }
                Layer::BatchNorm { name, .. } => b.norm(&name, h, mode, eps, stats)?,
                Layer::LeakyRelu => g.leaky_relu(h, slope),
                Layer::Flatten => g.reshape(h, &[batch, self.flat_dim()])?,
                Layer::Linear { name, .. } => g.linear(
                    h,
                    b.var(&format!("{name}.weight"))?,
                    Some(b.var(&format!("{name}.bias"))?),
                )?,
                other => return Err(Error::Contract(format!("unexpected encoder layer {other:?}"))),
            };
        }
        Ok(h)
    }

    /// Names of the tensors eligible for magnitude pruning: every
    /// convolution and linear weight.
    pub fn prunable(&self) -> Vec<String> {
        self.layers()
            .into_iter()
            .filter_map(|l| match l {
                Layer::Conv { name, .. } | Layer::Linear { name, .. } => Some(format!("{name}.weight")),
                _ => None,
            })
            .collect()
    }
}

/// Two-layer MLP head: linear, leaky ReLU, linear, optionally followed by
/// row normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    pub normalize: bool,
}

impl HeadSpec {
    pub fn projection(feature_dim: usize, proj_dim: usize) -> Self {
        HeadSpec {
            in_dim: feature_dim,
            hidden_dim: feature_dim,
            out_dim: proj_dim,
            leaky_slope: 0.2,
            normalize: true,
        }
    }

    pub fn score(feature_dim: usize) -> Self {
        HeadSpec {
            in_dim: feature_dim,
            hidden_dim: feature_dim,
            out_dim: 1,
            leaky_slope: 0.2,
            normalize: false,
        }
    }

    pub fn layers(&self, prefix: &str) -> Vec<Layer> {
        let mut out = vec![
            Layer::Linear {
                name: format!("{prefix}.fc0"),
                din: self.in_dim,
                dout: self.hidden_dim,
            },
            Layer::LeakyRelu,
            Layer::Linear {
                name: format!("{prefix}.fc1"),
                din: self.hidden_dim,
                dout: self.out_dim,
            },
        ];
        if self.normalize {
            out.push(Layer::RowNormalize);
        }
        out
    }

    pub fn init<T: Scalar>(&self, prefix: &str, seed: u64) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        for layer in self.layers(prefix) {
            if let Layer::Linear { name, din, dout } = layer {
                insert_linear(&mut ps, seed, &name, din, dout);
            }
        }
        ps
    }

    pub fn forward<T: Scalar>(&self, b: &Binding<'_, T>, prefix: &str, h: Var) -> Result<Var> {
        let g = b.graph();
        {
            let hv = g.value(h);
            if hv.rank() != 2 || hv.dim(1) != self.in_dim {
                return Err(Error::Shape(format!("{prefix} expects (B, {}), got {:?}", self.in_dim, hv.shape())));
            }
        }
        let slope: T = lit(self.leaky_slope);
        let mut x = h;
        for layer in self.layers(prefix) {
            x = match layer {
                Layer::Linear { name, .. } => g.linear(
                    x,
                    b.var(&format!("{name}.weight"))?,
                    Some(b.var(&format!("{name}.bias"))?),
                )?,
                Layer::LeakyRelu => g.leaky_relu(x, slope),
                Layer::RowNormalize => g.row_normalize(x)?,
                other => return Err(Error::Contract(format!("unexpected head layer {other:?}"))),
            };
        }
        Ok(x)
    }
}

/// Encoder plus its heads. `proj_dim` is the embedding width of both
/// projection heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub encoder: EncoderSpec,
    pub proj_dim: usize,
}

impl DiscriminatorSpec {
    pub fn projection(&self) -> HeadSpec {
        HeadSpec::projection(self.encoder.feature_dim, self.proj_dim)
    }

    pub fn score(&self) -> HeadSpec {
        HeadSpec::score(self.encoder.feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.proj_dim == 0 {
            return Err(Error::Config("proj_dim must be positive".into()));
        }
        Ok(())
    }

    /// Encoder, both projection heads and the score head.
    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut ps = self.encoder.init(seed)?;
        ps.extend(self.projection().init(PROJ_REAL, seed))?;
        ps.extend(self.projection().init(PROJ_FAKE, seed))?;
        ps.extend(self.score().init(SCORE, seed))?;
        Ok(ps)
    }

    pub fn encode<T: Scalar>(&self, b: &Binding<'_, T>, x: Var, mode: Mode, stats: &mut NormStats<T>) -> Result<Var> {
        self.encoder.forward(b, x, mode, stats)
    }

    /// Real-view projection to unit-norm embeddings.
    pub fn project_real<T: Scalar>(&self, b: &Binding<'_, T>, h: Var) -> Result<Var> {
        self.projection().forward(b, PROJ_REAL, h)
    }

    /// Fake-contrast projection to unit-norm embeddings.
    pub fn project_fake<T: Scalar>(&self, b: &Binding<'_, T>, h: Var) -> Result<Var> {
        self.projection().forward(b, PROJ_FAKE, h)
    }

    /// One real/fake logit per sample, shape (B,).
    pub fn score_real_fake<T: Scalar>(&self, b: &Binding<'_, T>, h: Var) -> Result<Var> {
        let s = self.score().forward(b, SCORE, h)?;
        let n = b.graph().value(s).dim(0);
        b.graph().reshape(s, &[n])
    }
}

fn name_stream(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    seed::rng(seed, &[u64::from_le_bytes(b)])
}

fn normal<T: Scalar>(seed: u64, name: &str, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
    let mut rng = name_stream(seed, &format!("{name}.weight"));
    let dist = Normal::new(mean, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.sample(dist))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn insert_linear<T: Scalar>(ps: &mut ParamSet<T>, seed: u64, name: &str, din: usize, dout: usize) {
    let bound = 1.0 / (din as f64).sqrt();
    let mut rng = name_stream(seed, name);
    ps.insert(format!("{name}.weight"), ParamKind::Weight, uniform(&mut rng, &[dout, din], bound));
    ps.insert(format!("{name}.bias"), ParamKind::Bias, uniform(&mut rng, &[dout], bound));
}

fn insert_norm<T: Scalar>(ps: &mut ParamSet<T>, seed: u64, name: &str, c: usize) {
    ps.insert(format!("{name}.weight"), ParamKind::NormScale, normal(seed, name, &[c], 1.0, 0.02));
    ps.insert(format!("{name}.bias"), ParamKind::NormShift, Tensor::zeros(&[c]));
    ps.insert(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(&[c]));
    ps.insert(format!("{name}.running_var"), ParamKind::RunningVar, Tensor::ones(&[c]));
}
