use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentationPolicy;
use crate::data::longtail::{Profile, Scale};
use crate::error::{Error, Result};
use crate::models::{DiscriminatorSpec, EncoderSpec, GeneratorSpec};
use crate::prune::DamageConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dcgan,
    Contrad,
    Damage,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dcgan, Variant::Contrad, Variant::Damage];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dcgan => "dcgan",
            Variant::Contrad => "contrad",
            Variant::Damage => "damage",
        }
    }

    /// Display name used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Dcgan => "DCGAN",
            Variant::Contrad => "ContraD",
            Variant::Damage => "Damage",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Only "adam" is supported.
    pub kind: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: "adam".into(),
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    Toy,
    Reference,
}

/// Evaluation settings used by in-training evaluation and as defaults of
/// the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub extractor: ExtractorKind,
    pub n_gen: usize,
    pub splits: usize,
    /// Inception weights (safetensors) and their pinned sha256.
    pub weights: Option<PathBuf>,
    pub weights_sha256: Option<String>,
    pub n_per_class: usize,
    pub major_classes: Vec<String>,
    pub minor_classes: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            extractor: ExtractorKind::Toy,
            n_gen: 10_000,
            splits: 10,
            weights: None,
            weights_sha256: None,
            n_per_class: 100,
            major_classes: vec!["frog".into(), "ship".into()],
            minor_classes: vec!["dog".into(), "truck".into()],
        }
    }
}

fn default_d_steps() -> usize {
    1
}
fn default_tau() -> f64 {
    0.1
}
fn default_one() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// A profile name (`full`, `partial`, `imbalanced`) or the path of a
    /// manifest written by `build-dataset`.
    pub dataset: String,
    #[serde(default)]
    pub dataset_scale: Scale,
    pub total_steps: u64,
    pub batch_size: usize,
    #[serde(default = "default_d_steps")]
    pub d_steps_per_g_step: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_one")]
    pub lambda_con: f64,
    #[serde(default = "default_one")]
    pub lambda_dis: f64,
    /// Required for the damage variant, ignored otherwise.
    #[serde(default)]
    pub damage: Option<DamageConfig>,
    #[serde(default)]
    pub seed: u64,
    /// 0 writes only the initial and final checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// 0 disables in-training evaluation.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub generator: GeneratorSpec,
    pub discriminator: Option<DiscriminatorSpec>,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    /// Score and fake-projection heads see stop-gradient encoder features.
    #[serde(default = "default_true")]
    pub detach_heads: bool,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The discriminator, defaulting to batch norm only for DCGAN.
    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        self.discriminator.clone().unwrap_or_else(|| DiscriminatorSpec {
            encoder: EncoderSpec {
                batch_norm: self.variant == Variant::Dcgan,
                ..EncoderSpec::default()
            },
            proj_dim: 128,
        })
    }

    pub fn damage_config(&self) -> Option<&DamageConfig> {
        match self.variant {
            Variant::Damage => self.damage.as_ref(),
            _ => None,
        }
    }

    /// The named profile, when `dataset` is not a manifest path.
    pub fn profile(&self) -> Option<Profile> {
        Profile::parse(&self.dataset).ok()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 4 {
            return bad("batch_size must be at least 4");
        }
        if self.d_steps_per_g_step == 0 {
            return bad("d_steps_per_g_step must be positive");
        }
        if self.optimizer.kind != "adam" {
            return Err(Error::Config(format!("unknown optimizer kind `{}` (expected adam)", self.optimizer.kind)));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer needs learning_rate > 0, betas in [0, 1) and eps > 0");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau must be positive");
        }
        if self.lambda_con < 0.0 || self.lambda_dis < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.dataset.is_empty() {
            return bad("dataset must name a profile or a manifest path");
        }
        match (self.variant, &self.damage) {
            (Variant::Damage, None) => return bad("variant damage requires a `damage` section"),
            (Variant::Damage, Some(d)) => d.validate()?,
            _ => {}
        }
        if self.eval.splits == 0 || self.eval.n_gen < 2 * self.eval.splits {
            return bad("eval needs splits >= 1 and n_gen >= 2 * splits");
        }
        if self.eval_every > 0
            && self.eval.extractor == ExtractorKind::Reference
            && (self.eval.weights.is_none() || self.eval.weights_sha256.is_none())
        {
            return bad("in-training evaluation with the reference extractor needs eval.weights and eval.weights_sha256");
        }
        self.generator.validate()?;
        self.discriminator_spec().validate()?;
        self.augmentation.validate()
    }
}
