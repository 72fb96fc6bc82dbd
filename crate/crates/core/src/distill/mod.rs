//! Two-stage training: layer-wise attention-output distillation from a
//! softmax teacher, then LoRA fine-tuning on the task loss.

mod optim;
mod recipe;
mod train;

pub use optim::{clip_grad_norm, cosine_lr, schedule_lr, AdamW, AdamWConfig, EpochMetrics, Schedule, ScheduleState};
pub use recipe::{
    distill_student, evaluate_lengths, finetune_student, median, mix, run_seeds, run_student, train_teacher,
    AccuracyGrid, Arm, RecipeConfig, RecipeReport, RunLog, StageReport, SweepReport, TaskConfig, SWA_WINDOW,
};
pub use train::{ce_loss, distill_loss, Batch, LossSpan, Stage, TrainConfig, Trainable, Trainer};
