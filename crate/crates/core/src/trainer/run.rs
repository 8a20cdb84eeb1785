//! The training loop over a run directory.
//!
//! ```text
//! <run>/config.json      the configuration the run was started with
//! <run>/manifest.json    dataset manifest (written by the caller)
//! <run>/losses.jsonl     {"step": N, "name": ..., "value": ...} per line
//! <run>/checkpoints/step-N
//! <run>/reports/
//! <run>/run.lock         present while a process owns the directory
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::{BatchKey, StepLosses, TrainConfig, TrainState, Trainer};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::prune::should_refresh;
use crate::scalar::Scalar;
use crate::seed::{self, Substream};

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step-{step}"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn lock_path(&self) -> PathBuf {
        self.root.join("run.lock")
    }

    /// Checkpoint steps present on disk, ascending.
    pub fn checkpoint_steps(&self) -> Result<Vec<u64>> {
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut steps = Vec::new();
        for e in fs::read_dir(&dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))? {
            let e = e.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
            if let Some(s) = e.file_name().to_str().and_then(|n| n.strip_prefix("step-")).and_then(|n| n.parse().ok()) {
                steps.push(s);
            }
        }
        steps.sort_unstable();
        Ok(steps)
    }

    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        Ok(self.checkpoint_steps()?.last().map(|&s| self.checkpoint(s)))
    }

    /// Take the directory lock; it is released when the guard drops.
    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(format!("creating {}", self.root.display()), e))?;
        let path = self.lock_path();
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            Error::io(
                format!("locking {} (another process may own this run; remove the file if not)", path.display()),
                e,
            )
        })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(RunLock { path })
    }
}

pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

pub fn read_losses(path: &Path) -> Result<Vec<LossRecord>> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::json(path.display().to_string(), e))?);
        }
    }
    Ok(out)
}

/// Keep only records up to `step` (used when resuming).
fn truncate_losses(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<LossRecord> = read_losses(path)?.into_iter().filter(|r| r.step <= step).collect();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(format!("rewriting {}", path.display()), e))?);
    for r in kept {
        write_record(&mut w, &r, path)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_record(w: &mut impl Write, r: &LossRecord, path: &Path) -> Result<()> {
    let line = serde_json::to_string(r).map_err(|e| Error::json("loss record", e))?;
    writeln!(w, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Fixed-order batch sampler: one seeded permutation per epoch, trailing
/// partial batches dropped.
pub struct BatchStream {
    seed: u64,
    n: usize,
    batch: usize,
    per_epoch: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchStream {
    pub fn new(seed: u64, n: usize, batch: usize) -> Result<Self> {
        if batch == 0 || n < batch {
            return Err(Error::InsufficientBatch(format!("{n} images cannot fill a batch of {batch}")));
        }
        Ok(BatchStream {
            seed,
            n,
            batch,
            per_epoch: (n / batch) as u64,
            cached: None,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.per_epoch
    }

    pub fn key(&self, counter: u64) -> BatchKey {
        BatchKey {
            epoch: counter / self.per_epoch,
            batch_index: counter % self.per_epoch,
        }
    }

    /// Dataset indices of the batch at `key`.
    pub fn indices(&mut self, key: BatchKey) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(key.epoch) {
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut seed::rng(self.seed, &[Substream::Train as u64, key.epoch, u64::MAX]));
            self.cached = Some((key.epoch, order));
        }
        let order = &self.cached.as_ref().expect("filled above").1;
        let start = key.batch_index as usize * self.batch;
        &order[start..start + self.batch]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub final_step: u64,
    pub already_complete: bool,
    pub checkpoints: Vec<PathBuf>,
}

/// Called with the state after step 0, every `eval_every` steps and after
/// the final step.
pub type EvalHook<'a, T> = dyn FnMut(&Trainer<T>, &TrainState<T>) -> Result<()> + 'a;

/// Train on `data` into `dir`. A fresh run refuses a directory that
/// already holds checkpoints; `resume` continues from the latest one.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    data: &LabeledImageSet,
    dir: &RunDir,
    resume: bool,
    hook: &mut EvalHook<'_, T>,
) -> Result<RunOutcome> {
    let trainer = Trainer::<T>::new(cfg)?;
    let mut stream = BatchStream::new(cfg.seed, data.len(), cfg.batch_size)?;
    fs::create_dir_all(dir.checkpoints()).map_err(|e| Error::io(format!("creating {}", dir.checkpoints().display()), e))?;
    let mut written = Vec::new();

    let mut state = match (resume, dir.latest_checkpoint()?) {
        (true, Some(path)) => {
            let (state, _) = checkpoint::load(&path, &trainer)?;
            if state.step >= cfg.total_steps {
                return Ok(RunOutcome {
                    final_step: state.step,
                    already_complete: true,
                    checkpoints: Vec::new(),
                });
            }
            truncate_losses(&dir.losses(), state.step)?;
            log::info!("resuming from {} at step {}", path.display(), state.step);
            state
        }
        (false, Some(path)) => {
            return Err(Error::Config(format!(
                "{} already holds checkpoints ({}); pass --resume to continue",
                dir.root.display(),
                path.display()
            )))
        }
        (_, None) => {
            fs::write(dir.config(), cfg.to_json()).map_err(|e| Error::io(format!("writing {}", dir.config().display()), e))?;
            File::create(dir.losses()).map_err(|e| Error::io(format!("creating {}", dir.losses().display()), e))?;
            let state = trainer.init_state()?;
            let p = dir.checkpoint(0);
            checkpoint::save(&state, cfg, &p)?;
            written.push(p);
            if cfg.eval_every > 0 {
                hook(&trainer, &state)?;
            }
            state
        }
    };

    let log_path = dir.losses();
    let mut log = BufWriter::new(
        OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?,
    );
    let k = cfg.d_steps_per_g_step as u64;
    while state.step < cfg.total_steps {
        let mut batches = Vec::with_capacity(k as usize);
        for i in 0..k {
            let key = stream.key(state.step * k + i);
            if cfg.damage_config().is_some() {
                let refresh = state.mask.is_none() || (key.epoch != state.epoch && should_refresh(key.epoch, cfg.damage_config().expect("damage")));
                if refresh {
                    trainer.refresh_mask(&mut state, key.epoch)?;
                }
            }
            state.epoch = key.epoch;
            batches.push((data.batch::<T>(stream.indices(key)), key));
        }
        let losses: StepLosses = trainer.train_step(&mut state, &batches)?;
        for (name, value) in losses.values {
            write_record(
                &mut log,
                &LossRecord {
                    step: losses.step,
                    name,
                    value,
                },
                &log_path,
            )?;
        }
        let s = state.step;
        let last = s == cfg.total_steps;
        if last || (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) {
            log.flush().map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
            let p = dir.checkpoint(s);
            checkpoint::save(&state, cfg, &p)?;
            written.push(p);
        }
        if cfg.eval_every > 0 && (last || s % cfg.eval_every == 0) {
            hook(&trainer, &state)?;
        }
        if s % 50 == 0 {
            log::info!("step {s}/{}", cfg.total_steps);
        }
    }
    log.flush().map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
    Ok(RunOutcome {
        final_step: state.step,
        already_complete: false,
        checkpoints: written,
    })
}
