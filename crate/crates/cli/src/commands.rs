use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dgan::data::cifar::write_cifar10;
use dgan::data::longtail::{build_dataset as build, DatasetManifest, DatasetRequest, LongTailSpec, Profile, Scale};
use dgan::data::store;
use dgan::data::synthetic::synthetic_cifar10;
use dgan::data::LabeledImageSet;
use dgan::metrics::eval::{encode_images, evaluate_gan, per_class_fid, reference_stats, GeneratorSampler};
use dgan::metrics::extractor::{FeatureExtractor, ToyExtractor};
use dgan::metrics::inception::InceptionV3;
use dgan::metrics::linear::{LinearEvaluator, LinearFitConfig};
use dgan::metrics::{class_deviation, FeatureStats};
use dgan::models::{DiscriminatorSpec, ParamSet};
use dgan::trainer::checkpoint::{self, CheckpointMeta};
use dgan::trainer::run::{train as run_training, RunDir, RunOutcome};
use dgan::trainer::{sample, ExtractorKind, Precision, TrainConfig, TrainState, Trainer};
use dgan::{Scalar, Tensor};

use crate::records::{self, MetricRecord, Origin};
use crate::{CliError, CliResult};

pub const METRICS: [&str; 4] = ["fid", "is", "deviation", "per-class-fid"];

fn source(explicit: Option<&Path>) -> CliResult<LabeledImageSet> {
    let root = store::source_root(explicit)?;
    Ok(store::load_source(&root)?)
}

// ---------------------------------------------------------------- datasets

pub struct BuildDatasetArgs {
    pub source: Option<PathBuf>,
    pub profile: Option<String>,
    pub scale: Scale,
    pub spec: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn build_dataset(args: &BuildDatasetArgs) -> CliResult<DatasetManifest> {
    let request = match (&args.profile, &args.spec) {
        (Some(p), None) => DatasetRequest::Profile {
            profile: Profile::parse(p)?,
            scale: args.scale,
        },
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
            let spec: LongTailSpec =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            spec.validate()?;
            DatasetRequest::Custom(spec)
        }
        _ => return Err(CliError::Usage("pass exactly one of --profile or --spec".into())),
    };
    let full = source(args.source.as_deref())?;
    let (indices, manifest) = build(&full, &request, args.seed)?;
    store::write_built(&args.out, &indices, &manifest)?;
    println!("{:<12} {:>6}", "class", "count");
    for (name, n) in manifest.class_names.iter().zip(&manifest.counts) {
        println!("{name:<12} {n:>6}");
    }
    println!("{:<12} {:>6}", "total", manifest.total);
    Ok(manifest)
}

pub fn make_synthetic(out: &Path, per_class: usize, seed: u64) -> CliResult<()> {
    if per_class == 0 {
        return Err(CliError::Usage("--per-class must be positive".into()));
    }
    let set = synthetic_cifar10(per_class, seed)?;
    write_cifar10(&set, out)?;
    println!("wrote {} images to {}", set.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- extractors

fn extractor<T: Scalar>(kind: ExtractorKind, weights: Option<&Path>, sha: Option<&str>) -> CliResult<Box<dyn FeatureExtractor<T>>> {
    match kind {
        ExtractorKind::Toy => Ok(Box::new(ToyExtractor::<T>::new())),
        ExtractorKind::Reference => match (weights, sha) {
            (Some(w), Some(s)) => Ok(Box::new(InceptionV3::<T>::load(w, s)?)),
            _ => Err(CliError::Usage("the reference extractor needs --weights and --weights-sha256".into())),
        },
    }
}

pub fn parse_extractor(s: &str) -> CliResult<ExtractorKind> {
    match s {
        "toy" => Ok(ExtractorKind::Toy),
        "reference" => Ok(ExtractorKind::Reference),
        other => Err(CliError::Usage(format!("unknown extractor `{other}` (expected toy or reference)"))),
    }
}

fn cache_dir(dir: &RunDir) -> CliResult<PathBuf> {
    let p = dir.root.join("cache");
    fs::create_dir_all(&p).map_err(|e| dgan::Error::io(format!("creating {}", p.display()), e))?;
    Ok(p)
}

// ---------------------------------------------------------------- train

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub resume: bool,
    pub seed: Option<u64>,
    pub source: Option<PathBuf>,
}

pub fn train(args: &TrainArgs) -> CliResult<RunOutcome> {
    let dir = RunDir::new(&args.out);
    let cfg_path = match (&args.config, args.resume) {
        (Some(p), _) => p.clone(),
        (None, true) if dir.config().exists() => dir.config(),
        _ => return Err(CliError::Usage("--config is required unless resuming a run that has one".into())),
    };
    let mut cfg = TrainConfig::load(&cfg_path)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let full = source(args.source.as_deref())?;
    let (data, manifest) = store::resolve(&cfg.dataset, cfg.dataset_scale, cfg.seed, &full)?;
    let _lock = dir.lock()?;
    if dir.manifest().exists() {
        let existing = store::read_manifest(&dir.manifest())?;
        if existing.hash() != manifest.hash() && args.resume {
            return Err(CliError::Usage(format!(
                "{} was trained on dataset {}, the config resolves to {}",
                dir.root.display(),
                &existing.hash()[..12],
                &manifest.hash()[..12]
            )));
        }
    }
    if args.resume {
        if let Some(p) = dir.latest_checkpoint()? {
            let meta = checkpoint::read_meta(&p)?;
            if meta.step < cfg.total_steps {
                // A run stopped early was evaluated at its last step; drop
                // that record unless the resumed cadence would write it too.
                let (k, every) = (meta.step, cfg.eval_every);
                records::retain_train_metrics(&dir, |s| s < k || (s == k && every > 0 && s % every == 0))?;
            }
        }
    }
    let started = Instant::now();
    let outcome = match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, &data, &manifest, &dir, args.resume)?,
        Precision::F64 => train_as::<f64>(&cfg, &data, &manifest, &dir, args.resume)?,
    };
    if outcome.already_complete {
        println!("run already complete at step {}", outcome.final_step);
    } else {
        records::append_timing(&dir, "train", started.elapsed().as_secs_f64())?;
        println!("trained to step {} in {}", outcome.final_step, dir.root.display());
    }
    Ok(outcome)
}

fn train_as<T: Scalar>(
    cfg: &TrainConfig,
    data: &LabeledImageSet,
    manifest: &DatasetManifest,
    dir: &RunDir,
    resume: bool,
) -> CliResult<RunOutcome> {
    let hash = manifest.hash();
    let eval = if cfg.eval_every > 0 {
        let ex = extractor::<T>(cfg.eval.extractor, cfg.eval.weights.as_deref(), cfg.eval.weights_sha256.as_deref())?;
        let reference = reference_stats(data, &hash, ex.as_ref(), Some(&cache_dir(dir)?))?;
        Some((ex, reference))
    } else {
        None
    };
    let mut hook = |tr: &Trainer<T>, st: &TrainState<T>| -> dgan::Result<()> {
        if let Some((ex, reference)) = &eval {
            let rows = gan_records(tr, st, ex.as_ref(), reference, &hash, Origin::Train)?;
            for r in &rows {
                log::info!("step {}: {} = {:.4}", r.step, r.name, r.value);
            }
            records::append_metrics(dir, &rows)?;
        }
        Ok(())
    };
    if dir.latest_checkpoint()?.is_none() {
        fs::create_dir_all(&dir.root).map_err(|e| dgan::Error::io(format!("creating {}", dir.root.display()), e))?;
        let text = serde_json::to_string_pretty(manifest).map_err(|e| dgan::Error::json("manifest", e))?;
        fs::write(dir.manifest(), text).map_err(|e| dgan::Error::io(format!("writing {}", dir.manifest().display()), e))?;
    }
    Ok(run_training::<T>(cfg, data, dir, resume, &mut hook)?)
}

fn gan_records<T: Scalar>(
    tr: &Trainer<T>,
    st: &TrainState<T>,
    ex: &dyn FeatureExtractor<T>,
    reference: &FeatureStats,
    hash: &str,
    origin: Origin,
) -> dgan::Result<Vec<MetricRecord>> {
    let sampler = GeneratorSampler {
        spec: &tr.gen_spec,
        params: &st.gen,
    };
    let e = &tr.cfg.eval;
    let s = evaluate_gan(&sampler, reference, ex, e.n_gen, e.splits, tr.cfg.seed)?;
    let rec = |name: &str, value: f64, std: Option<f64>| MetricRecord {
        name: name.into(),
        class: None,
        value,
        std,
        step: st.step,
        seed: tr.cfg.seed,
        dataset_hash: hash.into(),
        extractor: ex.id(),
        n_gen: e.n_gen,
        origin: origin.clone(),
    };
    Ok(vec![rec("fid", s.fid, None), rec("is", s.is_mean, Some(s.is_std))])
}

// ---------------------------------------------------------------- eval

#[derive(Default)]
pub struct EvalArgs {
    /// A run directory or a checkpoint inside one.
    pub run: PathBuf,
    pub dataset: Option<String>,
    pub extractor: Option<String>,
    pub metrics: String,
    pub n_gen: Option<usize>,
    pub splits: Option<usize>,
    pub seed: Option<u64>,
    pub n_per_class: Option<usize>,
    pub classes: Option<String>,
    pub source: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub weights_sha256: Option<String>,
}

pub fn parse_metrics(list: &str) -> CliResult<Vec<&'static str>> {
    let mut out = Vec::new();
    for m in list.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        match METRICS.iter().find(|k| **k == m) {
            Some(k) if !out.contains(k) => out.push(*k),
            Some(_) => {}
            None => {
                return Err(CliError::Usage(format!(
                    "unknown metric `{m}` (valid: {})",
                    METRICS.join(", ")
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("no metrics requested (valid: {})", METRICS.join(", "))));
    }
    Ok(out)
}

/// The run directory and checkpoint named by `path`.
fn locate(path: &Path) -> CliResult<(RunDir, PathBuf)> {
    if path.is_file() {
        let run = path
            .parent()
            .and_then(Path::parent)
            .ok_or_else(|| CliError::Usage(format!("{} is not inside a run directory", path.display())))?;
        return Ok((RunDir::new(run), path.to_path_buf()));
    }
    let dir = RunDir::new(path);
    let ckpt = dir
        .latest_checkpoint()?
        .ok_or_else(|| CliError::Runtime(format!("no checkpoints in {}", path.display())))?;
    Ok((dir, ckpt))
}

pub fn eval(args: &EvalArgs) -> CliResult<Vec<MetricRecord>> {
    let metrics = parse_metrics(&args.metrics)?;
    let (dir, ckpt) = locate(&args.run)?;
    let meta = checkpoint::read_meta(&ckpt)?;
    let mut cfg = meta.config.clone();
    if let Some(x) = &args.extractor {
        cfg.eval.extractor = parse_extractor(x)?;
    }
    if let Some(n) = args.n_gen {
        cfg.eval.n_gen = n;
    }
    if let Some(s) = args.splits {
        cfg.eval.splits = s;
    }
    if let Some(n) = args.n_per_class {
        cfg.eval.n_per_class = n;
    }
    if let Some(w) = &args.weights {
        cfg.eval.weights = Some(w.clone());
    }
    if let Some(s) = &args.weights_sha256 {
        cfg.eval.weights_sha256 = Some(s.clone());
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let full = source(args.source.as_deref())?;
    let dataset = match &args.dataset {
        Some(d) => d.clone(),
        None => dir.manifest().to_string_lossy().into_owned(),
    };
    let (data, manifest) = store::resolve(&dataset, cfg.dataset_scale, cfg.seed, &full)?;
    let classes: Vec<String> = match &args.classes {
        Some(c) => c.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => cfg.eval.major_classes.iter().chain(&cfg.eval.minor_classes).cloned().collect(),
    };
    let class_idx: Vec<usize> = classes
        .iter()
        .map(|c| {
            data.class_names()
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| CliError::Usage(format!("unknown class `{c}` (classes: {})", data.class_names().join(", "))))
        })
        .collect::<CliResult<_>>()?;
    let started = Instant::now();
    let job = EvalJob {
        cfg: &cfg,
        meta: &meta,
        ckpt: &ckpt,
        dir: &dir,
        data: &data,
        hash: manifest.hash(),
        seed,
        class_idx: &class_idx,
    };
    let rows = match cfg.precision {
        Precision::F32 => job.run::<f32>(&metrics)?,
        Precision::F64 => job.run::<f64>(&metrics)?,
    };
    records::append_metrics(&dir, &rows)?;
    records::append_timing(&dir, "eval", started.elapsed().as_secs_f64())?;
    println!("metric,class,value,std,step,seed,dataset_hash,extractor,n_gen");
    for r in &rows {
        println!(
            "{},{},{},{},{},{},{},{},{}",
            r.name,
            r.class.as_deref().unwrap_or(""),
            r.value,
            r.std.map(|v| v.to_string()).unwrap_or_default(),
            r.step,
            r.seed,
            r.dataset_hash,
            r.extractor,
            r.n_gen
        );
    }
    Ok(rows)
}

struct EvalJob<'a> {
    cfg: &'a TrainConfig,
    meta: &'a CheckpointMeta,
    ckpt: &'a Path,
    dir: &'a RunDir,
    data: &'a LabeledImageSet,
    hash: String,
    seed: u64,
    class_idx: &'a [usize],
}

impl EvalJob<'_> {
    fn run<T: Scalar>(&self, metrics: &[&str]) -> CliResult<Vec<MetricRecord>> {
        let e = &self.cfg.eval;
        let ex = extractor::<T>(e.extractor, e.weights.as_deref(), e.weights_sha256.as_deref())?;
        let (gen, _) = checkpoint::load_generator::<T>(self.ckpt)?;
        let gen_spec = &self.cfg.generator;
        let disc_spec = self.cfg.discriminator_spec();
        let sampler = GeneratorSampler { spec: gen_spec, params: &gen };
        let rec = |name: &str, class: Option<String>, value: f64| MetricRecord {
            name: name.into(),
            class,
            value,
            std: None,
            step: self.meta.step,
            seed: self.seed,
            dataset_hash: self.hash.clone(),
            extractor: ex.id(),
            n_gen: e.n_gen,
            origin: Origin::Eval,
        };
        let mut rows = Vec::new();
        if metrics.contains(&"fid") || metrics.contains(&"is") {
            let reference = reference_stats(self.data, &self.hash, ex.as_ref(), Some(&cache_dir(self.dir)?))
                .map_err(|err| CliError::from(err).context("metric fid"))?;
            let s = evaluate_gan(&sampler, &reference, ex.as_ref(), e.n_gen, e.splits, self.seed)
                .map_err(|err| CliError::from(err).context(if metrics.contains(&"fid") { "metric fid" } else { "metric is" }))?;
            if metrics.contains(&"fid") {
                rows.push(rec("fid", None, s.fid));
            }
            if metrics.contains(&"is") {
                rows.push(MetricRecord {
                    std: Some(s.is_std),
                    ..rec("is", None, s.is_mean)
                });
            }
        }
        let needs_labels = metrics.contains(&"deviation") || metrics.contains(&"per-class-fid");
        if !needs_labels {
            return Ok(rows);
        }
        let (disc, _) = checkpoint::load_discriminator::<T>(self.ckpt)?;
        let evaluator = self.linear_evaluator(&disc_spec, &disc)?;
        let labeler = |images: &Tensor<T>| -> dgan::Result<Vec<usize>> { evaluator.predict(&encode_images(&disc_spec.encoder, &disc, images)?) };
        let names = self.data.class_names();
        if metrics.contains(&"deviation") {
            let images = sample(gen_spec, &gen, e.n_gen, dgan::seed::derive(self.seed, &[dgan::seed::Substream::Eval as u64]), 250)
                .map_err(|err| CliError::from(err).context("metric deviation"))?;
            let labels = labeler(&images).map_err(|err| CliError::from(err).context("metric deviation"))?;
            let table = class_deviation(&labels, self.data.per_class_counts()).map_err(|err| CliError::from(err).context("metric deviation"))?;
            for (c, v) in table.per_class.iter().enumerate() {
                rows.push(rec("deviation", Some(names[c].clone()), *v));
            }
            rows.push(rec("deviation_mean", None, table.mean));
        }
        if metrics.contains(&"per-class-fid") {
            let r = per_class_fid(&sampler, self.data, ex.as_ref(), &labeler, self.class_idx, e.n_per_class, e.n_gen, self.seed)
                .map_err(|err| CliError::from(err).context("metric per-class-fid"))?;
            for (c, v) in &r.scaled {
                rows.push(rec("per_class_fid", Some(names[*c].clone()), *v));
            }
            rows.push(rec("per_class_fid_scale", None, r.scale));
        }
        Ok(rows)
    }

    /// The linear evaluator for this checkpoint, trained on frozen encoder
    /// features of the training set when no cached one exists.
    fn linear_evaluator<T: Scalar>(&self, spec: &DiscriminatorSpec, disc: &ParamSet<T>) -> CliResult<LinearEvaluator> {
        let path = self.dir.reports().join(format!("linear-step-{}-{}.json", self.meta.step, &self.hash[..12]));
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| dgan::Error::io(format!("reading {}", path.display()), e))?;
            return serde_json::from_str(&text).map_err(|e| CliError::Core(dgan::Error::json(path.display().to_string(), e)));
        }
        log::info!("no linear evaluator for step {}; training one on frozen encoder features", self.meta.step);
        eprintln!("training linear evaluator for step {} ({} images)", self.meta.step, self.data.len());
        let feats = encode_images(&spec.encoder, disc, &self.data.to_tensor::<T>())?;
        let labels: Vec<usize> = self.data.labels().iter().map(|&l| l as usize).collect();
        let cfg = LinearFitConfig {
            seed: self.seed,
            ..LinearFitConfig::default()
        };
        let ev = LinearEvaluator::fit(&feats, &labels, self.data.num_classes(), &cfg)?;
        log::info!("linear evaluator train accuracy {:.3}", ev.accuracy(&feats, &labels)?);
        fs::create_dir_all(self.dir.reports()).map_err(|e| dgan::Error::io(format!("creating {}", self.dir.reports().display()), e))?;
        let text = serde_json::to_string(&ev).map_err(|e| dgan::Error::json("linear evaluator", e))?;
        fs::write(&path, text).map_err(|e| dgan::Error::io(format!("writing {}", path.display()), e))?;
        Ok(ev)
    }
}
