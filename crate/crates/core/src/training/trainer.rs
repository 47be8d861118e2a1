//! The training driver: epoch loop, patience schedule, checkpoints.
//!
//! Training runs in two phases. The main phase uses the configured learning
//! rate. Once the dev phone error rate stops improving for `patience`
//! consecutive epochs, the driver switches to a fine-tuning phase with a
//! lower rate and weight decay, and stops after patience runs out a second
//! time. Every epoch writes a numbered checkpoint into the run directory;
//! existing files are never overwritten, so a directory can be resumed or
//! audited after the fact.
//!
//! All randomness flows through counter-derived streams keyed on the run
//! seed, the epoch and the step, so a resumed run replays exactly the same
//! trajectory as an uninterrupted one.

use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{
    batch_from_records, feature_lengths, plan_batches, Batch, Manifest, Record, Split,
};
use crate::decoding::decode_features;
use crate::error::{Error, Result};
use crate::evaluation::error_rate;
use crate::features::io::read_features;
use crate::features::NormStats;
use crate::layers::Mode;
use crate::rng::{stream_rng_at, Stream};
use crate::seq2seq::{ModelConfig, Seq2Seq};
use crate::training::config::TrainConfig;
use crate::training::loss::cross_entropy;
use crate::training::metrics::MetricsLog;
use crate::training::optim::{add_weight_decay, clip_gradients, global_norm, Optimizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Main,
    FineTune,
}

impl Phase {
    fn code(self) -> f64 {
        match self {
            Phase::Main => 0.0,
            Phase::FineTune => 1.0,
        }
    }

    fn from_code(v: f64) -> Result<Phase> {
        match v {
            v if v == 0.0 => Ok(Phase::Main),
            v if v == 1.0 => Ok(Phase::FineTune),
            other => Err(Error::Checkpoint(format!("unknown phase code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_factor: f64,
}

/// What the patience schedule decided at the end of an epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochDecision {
    pub improved: bool,
    pub transitioned: bool,
    pub stop: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_dev_per: f64,
    pub best_epoch: usize,
    /// Number of phase switches taken (at most one).
    pub transitions: usize,
    /// True when patience ran out in the fine-tuning phase; false when the
    /// epoch cap ended the run first.
    pub stopped_by_patience: bool,
}

pub struct Trainer {
    pub model: Seq2Seq,
    pub opt: Optimizer,
    pub cfg: TrainConfig,
    pub norm: NormStats,
    seed: u64,
    phase: Phase,
    epoch: usize,
    global_step: u64,
    best_dev: f64,
    best_epoch: usize,
    stale: usize,
    transitions: usize,
}

impl Trainer {
    pub fn new(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        seed: u64,
        norm: NormStats,
    ) -> Result<Trainer> {
        cfg.validate()?;
        let model = Seq2Seq::new(model_cfg, seed)?;
        let manifest = model.param_manifest();
        let opt = Optimizer::adam(cfg.learning_rate, &manifest);
        Ok(Trainer {
            model,
            opt,
            cfg,
            norm,
            seed,
            phase: Phase::Main,
            epoch: 0,
            global_step: 0,
            best_dev: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
            transitions: 0,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn best_dev(&self) -> (f64, usize) {
        (self.best_dev, self.best_epoch)
    }

    /// One forward/backward/update pass over a batch. The dropout stream is
    /// keyed on (epoch, step) so the pass is a pure function of the trainer
    /// state and the batch.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        epoch: usize,
        step_in_epoch: u64,
    ) -> Result<StepStats> {
        let mut t = Tape::new();
        let x = t.constant(batch.features.clone(), &batch.shape)?;
        let mut rng = stream_rng_at(self.seed, Stream::Dropout, epoch as u64, step_in_epoch);
        let out = self.model.teacher_forced(
            &mut t,
            x,
            &batch.feat_lens,
            &batch.targets,
            Mode::Train,
            &mut rng,
        )?;
        let loss = cross_entropy(&mut t, out.log_probs, &out.targets)?;
        let loss_val = t.value(loss)[0];
        t.backward(loss)?;

        let mut grads = collect_grads(&self.model, &t)?;
        if self.phase == Phase::FineTune && self.cfg.weight_decay > 0.0 {
            add_weight_decay(&self.model, &mut grads, self.cfg.weight_decay)?;
        }
        let grad_norm = global_norm(&grads)?;
        let clip_factor = clip_gradients(&mut grads, self.cfg.clip_norm)?;
        self.opt.apply(&mut self.model, &grads)?;
        self.global_step += 1;
        Ok(StepStats {
            loss: loss_val,
            grad_norm,
            clip_factor,
        })
    }

    /// Greedy-decodes the dev set and returns its phone error rate.
    pub fn evaluate(&mut self, records: &[&Record]) -> Result<f64> {
        let mut pairs = Vec::with_capacity(records.len());
        for r in records {
            let mut feat = read_features(&r.path)?;
            self.norm.apply(&mut feat)?;
            let decoded = decode_features(&mut self.model, &feat, 1, None)?;
            pairs.push((r.labels.clone(), decoded.tokens));
        }
        error_rate(&pairs)
    }

    /// Runs epochs until patience is exhausted in both phases or the epoch
    /// cap is reached. Appends to `metrics.log` and writes one checkpoint
    /// per epoch under `run_dir`.
    pub fn run(&mut self, manifest: &Manifest, run_dir: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(run_dir)
            .map_err(|e| Error::io(format!("creating {}", run_dir.display()), e))?;
        let train = manifest.split(Split::Train);
        let dev = manifest.split(Split::Dev);
        if train.is_empty() {
            return Err(Error::Data("manifest has no train records".into()));
        }
        if dev.is_empty() {
            return Err(Error::Data("manifest has no dev records".into()));
        }
        let lens = feature_lengths(&train)?;
        let mut metrics = MetricsLog::open(&run_dir.join("metrics.log"))?;

        let mut stopped_by_patience = false;
        while self.epoch < self.cfg.max_epochs {
            let epoch = self.epoch + 1;
            let mut shuffle = stream_rng_at(self.seed, Stream::Shuffle, epoch as u64, 0);
            let plan = plan_batches(&lens, self.cfg.batch_size, &mut shuffle);
            let mut loss_sum = 0.0;
            let mut norm_sum = 0.0;
            for (bi, group) in plan.iter().enumerate() {
                let selected: Vec<&Record> = group.iter().map(|&i| train[i]).collect();
                let batch = batch_from_records(&selected, Some(&self.norm))?;
                let stats = self
                    .train_step(&batch, epoch, bi as u64)
                    .map_err(|e| divergence(e, epoch, bi))?;
                loss_sum += stats.loss;
                norm_sum += stats.grad_norm;
                metrics.record(
                    epoch,
                    self.global_step,
                    stats.loss,
                    stats.grad_norm,
                    self.opt.lr,
                    None,
                )?;
            }
            let dev_per = self
                .evaluate(&dev)
                .map_err(|e| divergence(e, epoch, plan.len()))?;
            let n = plan.len() as f64;
            metrics.record(
                epoch,
                self.global_step,
                loss_sum / n,
                norm_sum / n,
                self.opt.lr,
                Some(dev_per),
            )?;
            let decision = self.note_epoch(epoch, dev_per);
            self.save_checkpoint(run_dir, epoch, dev_per)?;
            if decision.stop {
                stopped_by_patience = true;
                break;
            }
        }
        Ok(TrainOutcome {
            epochs_run: self.epoch,
            best_dev_per: self.best_dev,
            best_epoch: self.best_epoch,
            transitions: self.transitions,
            stopped_by_patience,
        })
    }

    /// Feeds one epoch's dev error into the patience schedule. A strictly
    /// better value resets the counter; once `max(patience, 1)` consecutive
    /// epochs fail to improve, the main phase hands over to fine tuning at
    /// the lower rate, and the fine-tuning phase asks to stop.
    pub fn note_epoch(&mut self, epoch: usize, dev_per: f64) -> EpochDecision {
        self.epoch = epoch;
        let improved = dev_per < self.best_dev;
        if improved {
            self.best_dev = dev_per;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let mut transitioned = false;
        let mut stop = false;
        if self.stale >= self.cfg.patience.max(1) {
            match self.phase {
                Phase::Main => {
                    self.phase = Phase::FineTune;
                    self.opt.lr = self.cfg.fine_tune_lr;
                    self.stale = 0;
                    self.transitions += 1;
                    transitioned = true;
                }
                Phase::FineTune => stop = true,
            }
        }
        EpochDecision {
            improved,
            transitioned,
            stop,
        }
    }

    /// Writes `epoch-NNNN.ckpt` holding the model, the optimizer state, the
    /// trainer counters and the normalization statistics. Refuses to clobber
    /// an existing file: run directories are append-only.
    pub fn save_checkpoint(&self, run_dir: &Path, epoch: usize, dev_per: f64) -> Result<PathBuf> {
        let path = run_dir.join(format!("epoch-{epoch:04}.ckpt"));
        if path.exists() {
            return Err(Error::Checkpoint(format!(
                "{} already exists; run directories are append-only",
                path.display()
            )));
        }
        let mut ck = self.model.to_checkpoint();
        self.opt.save_into(&mut ck)?;
        ck.insert_scalar("trainer.epoch", epoch as f64)?;
        ck.insert_scalar("trainer.phase", self.phase.code())?;
        ck.insert_scalar("trainer.best_dev", self.best_dev)?;
        ck.insert_scalar("trainer.best_epoch", self.best_epoch as f64)?;
        ck.insert_scalar("trainer.stale", self.stale as f64)?;
        ck.insert_scalar("trainer.global_step", self.global_step as f64)?;
        ck.insert_scalar("trainer.transitions", self.transitions as f64)?;
        ck.insert_scalar("trainer.dev_per", dev_per)?;
        ck.insert("norm.mean", &[self.norm.mean.len()], self.norm.mean.clone())?;
        ck.insert("norm.std", &[self.norm.std.len()], self.norm.std.clone())?;
        ck.save(&path)?;
        Ok(path)
    }

    /// Restores model weights, optimizer state and trainer counters from a
    /// checkpoint written by `save_checkpoint`.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.model.restore_from(ck)?;
        self.opt.restore_from(ck)?;
        let scalar = |name: &str| {
            ck.scalar(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing scalar {name}")))
        };
        self.epoch = scalar("trainer.epoch")? as usize;
        self.phase = Phase::from_code(scalar("trainer.phase")?)?;
        self.best_dev = scalar("trainer.best_dev")?;
        self.best_epoch = scalar("trainer.best_epoch")? as usize;
        self.stale = scalar("trainer.stale")? as usize;
        self.global_step = scalar("trainer.global_step")? as u64;
        self.transitions = scalar("trainer.transitions")? as usize;
        let arr = |name: &str| {
            ck.get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let (_, mean) = arr("norm.mean")?;
        let (_, std) = arr("norm.std")?;
        if mean.len() != std.len() {
            return Err(Error::Checkpoint(
                "norm.mean and norm.std disagree on dimension".into(),
            ));
        }
        self.norm = NormStats {
            mean: mean.to_vec(),
            std: std.to_vec(),
        };
        Ok(())
    }
}

/// Gradients for every model parameter in manifest order, so downstream
/// consumers never depend on hash-map iteration order.
fn collect_grads(model: &Seq2Seq, t: &Tape) -> Result<Vec<(String, Vec<f64>)>> {
    let manifest = model.param_manifest();
    let mut grads = Vec::with_capacity(manifest.len());
    for (name, _) in manifest {
        let var = t
            .param_var(&name)
            .ok_or_else(|| Error::Training(format!("parameter {name} is not on the tape")))?;
        let g = t
            .grad(var)
            .ok_or_else(|| Error::Training(format!("parameter {name} received no gradient")))?;
        grads.push((name, g.to_vec()));
    }
    Ok(grads)
}

/// Maps numeric blow-ups to a divergence error so the caller knows the run
/// aborted and the last completed epoch's checkpoint is the one to keep.
fn divergence(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            step,
            reason: format!("non-finite values in {op}"),
        },
        Error::Training(msg) if msg.contains("non-finite") => Error::Diverged {
            epoch,
            step,
            reason: msg,
        },
        other => other,
    }
}

/// Finds the highest-numbered `epoch-NNNN.ckpt` in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !run_dir.exists() {
        return Ok(None);
    }
    let entries = std::fs::read_dir(run_dir)
        .map_err(|e| Error::io(format!("reading {}", run_dir.display()), e))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io("reading run directory", e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let number = name
            .strip_prefix("epoch-")
            .and_then(|rest| rest.strip_suffix(".ckpt"))
            .and_then(|digits| digits.parse::<usize>().ok());
        if let Some(n) = number {
            if best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, entry.path()));
            }
        }
    }
    Ok(best)
}

/// Mean and standard deviation over every frame of the given records'
/// feature files, used to normalize train, dev and test identically.
pub fn corpus_norm_stats(records: &[&Record]) -> Result<NormStats> {
    let mut tensors = Vec::with_capacity(records.len());
    for r in records {
        tensors.push(read_features(&r.path)?);
    }
    NormStats::compute(&tensors)
}
