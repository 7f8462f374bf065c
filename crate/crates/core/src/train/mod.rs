//! Training: configuration, AdamW, checkpoints, logs and the loop itself.

mod checkpoint;
mod config;
mod optim;
mod runlog;

use std::path::{Path, PathBuf};
use std::time::Instant;

use scb_tensor::{Real, RngState, Tape, Var};
use serde::Serialize;

pub use checkpoint::{blob_path, Checkpoint, Manifest, TensorEntry, FORMAT, VERSION};
pub use config::{OptimConfig, TrainConfig};
pub use optim::{adamw_step, clip_grad_norm, global_norm, AdamHyper, AdamState};
pub use runlog::{append_json, read_records, RunLog, StepRecord, TimingRecord};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, EvalReport};
use crate::inference::evaluate_model;
use crate::loss::{hungarian_loss, LossReport, LossWeights};
use crate::model::Detector;
use crate::nn::{Ctx, ParamStore};

const DROP_PATH_STREAM: u64 = 0x4452_4f50;

/// Mean loss over the images of a batch, each run through its own forward pass.
pub fn batch_loss<'t, T: Real>(model: &Detector, ctx: &Ctx<'t, T>, batch: &[Sample], w: &LossWeights) -> Result<(Var<'t, T>, LossReport)> {
    let mut total: Option<Var<'t, T>> = None;
    let mut reports = Vec::with_capacity(batch.len());
    for s in batch {
        let outs = model.forward(ctx, ctx.constant(s.image.cast()))?;
        let (l, r) = hungarian_loss(&outs, &s.gts, w)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
        reports.push(r);
    }
    let total = total.ok_or_else(|| Error::Validation("empty batch".into()))?;
    Ok((total.mul_scalar(T::from_f64(1.0 / batch.len() as f64))?, LossReport::mean(&reports)))
}

/// Model, parameters and optimizer state at a given step.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Detector,
    pub store: ParamStore,
    pub opt: AdamState,
    /// Steps completed so far.
    pub step: usize,
    pub dataset: Dataset,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = Dataset::open(&cfg.data)?;
        if dataset.index.num_classes() != cfg.model.num_classes {
            return Err(Error::Validation(format!(
                "model.num_classes is {} but the dataset has {} categories",
                cfg.model.num_classes,
                dataset.index.num_classes()
            )));
        }
        let (model, store) = Detector::new(&cfg.model, cfg.seed)?;
        let opt = AdamState::new(store.values());
        Ok(Trainer { cfg: cfg.clone(), model, store, opt, step: 0, dataset })
    }

    /// Continues from `ck`, which must carry optimizer state and the same model configuration.
    pub fn resume(cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.config.model != cfg.model {
            return Err(Error::Validation("resume: model configuration differs from the checkpoint".into()));
        }
        let mut t = Trainer::new(cfg)?;
        ck.restore_into(&mut t.store)?;
        t.opt = ck.optimizer.clone().ok_or_else(|| Error::Validation("resume: checkpoint has no optimizer state".into()))?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.step, &self.cfg, self.dataset.class_names(), &self.store, Some(&self.opt))
    }

    /// Runs step `self.step + 1`: forward, loss, backward, clip, AdamW.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let batch = self.dataset.batch(self.cfg.batch_size, self.cfg.data_seed, step - 1)?;
        let tape = Tape::<f32>::new().with_paranoid(false);
        let rng = RngState::new(self.cfg.data_seed).split(DROP_PATH_STREAM).split(step as u64);
        let ctx = Ctx::bind(&tape, &self.store, true).with_training(true, rng);
        let (loss, report) = batch_loss(&self.model, &ctx, &batch, &self.cfg.loss)?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last: format!("cls {} l1 {} giou {}", report.cls, report.l1, report.giou),
            });
        }
        let mut grads = tape.backward(loss)?;
        let mut grads: Vec<_> = ctx.params().iter().map(|&p| grads.take(p)).collect();
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.optim.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, last: format!("loss {value} with gradient norm {grad_norm}") });
        }
        let o = &self.cfg.optim;
        let lr = o.lr_at(step);
        let hyper = AdamHyper { lr, weight_decay: o.weight_decay, beta1: o.betas[0], beta2: o.betas[1], eps: o.eps };
        adamw_step(self.store.values_mut(), &grads, &mut self.opt, &hyper)?;
        self.step = step;
        Ok(StepRecord { step, total: report.total, cls: report.cls, l1: report.l1, giou: report.giou, lr, grad_norm })
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        Ok(evaluate_model(&self.model, &self.store, &self.dataset, &EvalConfig::default())?.0)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_checkpoint: PathBuf,
    pub records: Vec<StepRecord>,
    pub last_eval: Option<EvalReport>,
}

/// Paths of the files a run writes under its output directory.
pub struct RunFiles {
    pub config: PathBuf,
    pub runlog: PathBuf,
    pub timing: PathBuf,
    pub eval: PathBuf,
    pub final_checkpoint: PathBuf,
}

impl RunFiles {
    pub fn new(out: &Path) -> Self {
        RunFiles {
            config: out.join("config.json"),
            runlog: out.join("runlog.jsonl"),
            timing: out.join("timing.jsonl"),
            eval: out.join("eval.jsonl"),
            final_checkpoint: out.join("final.json"),
        }
    }

    pub fn step_checkpoint(out: &Path, step: usize) -> PathBuf {
        out.join(format!("ckpt-{step:06}.json"))
    }
}

/// Trains to `cfg.steps`, optionally resuming, writing logs and checkpoints under `out`.
/// `on_step` sees every record as it is produced.
pub fn train(cfg: &TrainConfig, out: &Path, resume: Option<&Path>, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let files = RunFiles::new(out);
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    std::fs::write(&files.config, cfg.to_json() + "\n").map_err(|e| Error::io(&files.config, e))?;
    let mut log = RunLog::open(&files.runlog, Some(trainer.step))?;
    if resume.is_none() {
        for p in [&files.timing, &files.eval] {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
    }
    let start = Instant::now();
    let mut records = Vec::new();
    let mut last_eval = None;
    while trainer.step < cfg.steps {
        let r = trainer.train_step()?;
        log.append(&r)?;
        append_json(&files.timing, &TimingRecord { step: r.step, wall_secs: start.elapsed().as_secs_f64() })?;
        on_step(&r);
        records.push(r);
        let step = trainer.step;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            trainer.checkpoint().save(&RunFiles::step_checkpoint(out, step))?;
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < cfg.steps {
            let rep = trainer.evaluate()?;
            append_json(&files.eval, &EvalRecord { step, map: rep.map, ap50: rep.ap50 })?;
            last_eval = Some(rep);
        }
    }
    trainer.checkpoint().save(&files.final_checkpoint)?;
    // a non-empty run always ends with an evaluation of the final weights
    if cfg.steps > 0 {
        let rep = trainer.evaluate()?;
        append_json(&files.eval, &EvalRecord { step: trainer.step, map: rep.map, ap50: rep.ap50 })?;
        last_eval = Some(rep);
    }
    Ok(TrainSummary { steps: trainer.step, final_checkpoint: files.final_checkpoint, records, last_eval })
}
