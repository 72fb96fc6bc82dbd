use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, schedule_lr, AdamW, AdamWConfig, EpochMetrics, Schedule, ScheduleState};
use crate::lawcat::ScanMode;
use crate::model::Model;
use crate::numerics::{Binder, Tape};
use crate::tasks::SampleRecord;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Next-token training of the softmax teacher from scratch.
    Pretrain,
    Distill,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Distill => "distill",
            Self::Finetune => "finetune",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Self::Pretrain => 3e-3,
            Self::Distill => 0.1,
            Self::Finetune => 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub schedule: Schedule,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// Whether distillation also updates Wq/Wk/Wv/Wo.
    #[serde(default)]
    pub train_projections: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Steps between validation-loss evaluations in plateau mode.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    50
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            lr: stage.default_lr(),
            schedule: Schedule::Cosine,
            plateau_patience: 2,
            plateau_factor: 0.5,
            batch_size: 16,
            max_steps: 500,
            seed: 0,
            adamw: AdamWConfig::default(),
            train_projections: false,
            grad_clip: Some(1.0),
            eval_every: default_eval_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor must be in (0,1), got {}",
                self.plateau_factor
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be >= 1".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Which parameters an update may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Trainable {
    /// conv, feature map and gate of LAWCAT layers.
    pub internals: bool,
    /// Wq/Wk/Wv/Wo of the attention blocks.
    pub projections: bool,
    pub lora: bool,
    /// Everything else: embeddings, norms, MLPs, head.
    pub rest: bool,
}

const INTERNALS: [&str; 7] = ["conv_q", "conv_k", "w_phi", "w_phi_k", "gate_w1", "gate_w2", "gate_b"];
const PROJECTIONS: [&str; 4] = ["wq", "wk", "wv", "wo"];

impl Trainable {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            internals: true,
            projections: true,
            lora: true,
            rest: true,
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if name.contains(".lora.") {
            self.lora
        } else if name.contains(".attn.") && INTERNALS.contains(&leaf) {
            self.internals
        } else if name.contains(".attn.") && PROJECTIONS.contains(&leaf) {
            self.projections
        } else {
            self.rest
        }
    }
}

/// Equal-length sequences stacked row-wise, with next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub seq_len: usize,
    /// Target for each row; `None` rows are masked from the loss.
    pub targets: Vec<Option<usize>>,
}

/// Which next-token predictions count towards the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpan {
    Answer,
    All,
}

impl Batch {
    pub fn from_records(records: &[SampleRecord], span: LossSpan) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let n = first.tokens.len();
        let mut tokens = Vec::with_capacity(n * records.len());
        let mut targets = Vec::with_capacity(n * records.len());
        for r in records {
            if r.tokens.len() != n {
                return Err(Error::Data("batch records differ in length".into()));
            }
            if r.answer_end <= r.answer_start || r.answer_start == 0 || r.answer_end > n {
                return Err(Error::Data(format!("empty or invalid answer span in sample seed {}", r.seed)));
            }
            tokens.extend_from_slice(&r.tokens);
            for p in 0..n {
                let next = r.tokens.get(p + 1).copied();
                let counted = match span {
                    LossSpan::All => true,
                    LossSpan::Answer => p + 1 >= r.answer_start && p + 1 < r.answer_end,
                };
                targets.push(if counted { next } else { None });
            }
        }
        Ok(Self {
            tokens,
            seq_len: n,
            targets,
        })
    }
}

/// Optimizer, schedule and step counter of one training stage.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub sched: ScheduleState,
    pub trainable: Trainable,
    pub mode: ScanMode,
    pub step: usize,
}

impl Trainer {
    /// Default trainable set per stage: distillation updates LAWCAT
    /// internals (and projections if configured), fine-tuning updates LoRA
    /// adapters plus internals, pretraining updates everything.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let trainable = match cfg.stage {
            Stage::Pretrain => Trainable::all(),
            Stage::Distill => Trainable {
                internals: true,
                projections: cfg.train_projections,
                ..Trainable::none()
            },
            Stage::Finetune => Trainable {
                internals: true,
                lora: true,
                ..Trainable::none()
            },
        };
        Ok(Self {
            opt: AdamW::new(cfg.adamw),
            sched: ScheduleState::new(cfg.schedule, cfg.lr, cfg.max_steps, cfg.plateau_patience, cfg.plateau_factor),
            trainable,
            mode: ScanMode::Recurrent,
            step: 0,
            cfg,
        })
    }

    pub fn lr(&self) -> f64 {
        self.sched.lr_at(self.step)
    }

    /// Feeds a validation loss to the plateau schedule.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        schedule_lr(
            &mut self.sched,
            EpochMetrics {
                step: self.step,
                val_loss: Some(val_loss),
            },
        )
    }

    fn apply(&mut self, model: &mut Model, binder: &Binder, tape: &Tape) -> Result<()> {
        let mut grads: BTreeMap<String, _> = binder.grads(tape).into_iter().collect();
        if let Some(c) = self.cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = self.lr();
        let mut params = model.named_mut();
        self.opt.step(&mut params, &grads, lr)?;
        self.step += 1;
        Ok(())
    }

    fn binder(&self) -> Binder {
        let t = self.trainable;
        Binder::new(move |n| t.contains(n))
    }

    /// Layer-wise MSE between student and teacher attention outputs, with
    /// every student attention block fed the teacher's block input. Takes
    /// one optimizer step and returns the loss before it.
    pub fn distill_step(&mut self, teacher: &Model, student: &mut Model, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = self.binder();
        let loss = distill_loss_op(&mut tape, &mut binder, teacher, student, batch, self.mode)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        self.apply(student, &binder, &tape)?;
        Ok(value)
    }

    /// Next-token cross-entropy on the batch targets and one optimizer step.
    pub fn ce_step(&mut self, model: &mut Model, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = self.binder();
        let f = model.forward_op(&mut tape, &mut binder, &batch.tokens, batch.seq_len, self.mode)?;
        let loss = tape.cross_entropy(f.logits, &batch.targets)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        self.apply(model, &binder, &tape)?;
        Ok(value)
    }

    /// Fine-tuning step on answer-span targets. The model must carry LoRA
    /// adapters.
    pub fn finetune_step(&mut self, model: &mut Model, batch: &Batch) -> Result<f64> {
        if model.cfg.lora.is_none() {
            return Err(Error::Config("fine-tuning needs LoRA adapters attached".into()));
        }
        self.ce_step(model, batch)
    }
}

fn distill_loss_op(
    tape: &mut Tape,
    binder: &mut Binder,
    teacher: &Model,
    student: &Model,
    batch: &Batch,
    mode: ScanMode,
) -> Result<crate::Var> {
    if teacher.blocks.len() != student.blocks.len() {
        return Err(Error::Config(format!(
            "teacher has {} layers, student {}",
            teacher.blocks.len(),
            student.blocks.len()
        )));
    }
    if student.blocks.is_empty() {
        return Err(Error::Config("distillation needs at least one layer".into()));
    }
    let t = teacher.forward_batch(&batch.tokens, batch.seq_len, mode)?;
    let mut total = None;
    for (l, (h, target)) in t.attn_inputs.into_iter().zip(t.attn_outputs).enumerate() {
        let h = tape.constant(h);
        let target = tape.constant(target);
        let out = student.attn_op(tape, binder, l, h, batch.seq_len, mode)?;
        let d = tape.sub(out, target)?;
        let sq = tape.mul(d, d)?;
        let m = tape.mean_all(sq)?;
        total = Some(match total {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    let total = total.expect("at least one layer");
    tape.scale(total, 1.0 / student.blocks.len() as f64)
}

/// Distillation loss without an update.
pub fn distill_loss(teacher: &Model, student: &Model, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let v = distill_loss_op(&mut tape, &mut binder, teacher, student, batch, ScanMode::Recurrent)?;
    Ok(tape.value(v).item())
}

/// Cross-entropy on the batch targets without an update.
pub fn ce_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let f = model.forward_op(&mut tape, &mut binder, &batch.tokens, batch.seq_len, ScanMode::Recurrent)?;
    let v = tape.cross_entropy(f.logits, &batch.targets)?;
    Ok(tape.value(v).item())
}
