use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::train::{ce_loss, distill_loss, Batch, LossSpan, Stage, TrainConfig, Trainer};
use super::optim::Schedule;
use crate::lawcat::LawcatConfig;
use crate::model::{LoraConfig, Model, ModelConfig};
use crate::tasks::{evaluate, generate, SampleRecord, Split, TaskKind, Vocab};
use crate::{Error, Result};

/// Which synthetic task the recipe trains and evaluates on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub train_len: usize,
    pub key_digits: usize,
    /// Sequence lengths cycled through while pretraining the teacher.
    pub curriculum: Vec<usize>,
    pub eval_lengths: Vec<usize>,
    pub n_eval: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Passkey,
            train_len: 128,
            key_digits: 5,
            curriculum: vec![32, 64, 96, 128, 128],
            eval_lengths: vec![128, 256],
            n_eval: 100,
        }
    }
}

impl TaskConfig {
    /// Tokens generated after the prompt when scoring.
    pub fn answer_len(&self) -> usize {
        match self.task {
            TaskKind::Passkey => self.key_digits,
            TaskKind::Niah1 | TaskKind::Niah2 => 5,
            TaskKind::Niah3 => 8,
        }
    }

    fn sample(&self, seed: u64, len: usize, split: Split) -> Result<SampleRecord> {
        generate(self.task, seed, len, self.key_digits, split)
    }

    pub fn train_batch(&self, stream: u64, step: usize, batch_size: usize, len: usize) -> Result<Batch> {
        let recs = (0..batch_size)
            .map(|i| self.sample(mix(stream, (step * batch_size + i) as u64), len, Split::Train))
            .collect::<Result<Vec<_>>>()?;
        Batch::from_records(&recs, LossSpan::Answer)
    }

    /// Fixed held-out samples at `len`, identical for every run.
    pub fn eval_suite(&self, len: usize) -> Result<Vec<SampleRecord>> {
        (0..self.n_eval)
            .map(|i| self.sample(mix(EVAL_STREAM ^ len as u64, i as u64), len, Split::Eval))
            .collect()
    }
}

const EVAL_STREAM: u64 = 0xE7A1_0000_0000_0000;
const PRETRAIN_STREAM: u64 = 0x7EAC_0000_0000_0000;
const DISTILL_STREAM: u64 = 0xD157_0000_0000_0000;
const FINETUNE_STREAM: u64 = 0xF17E_0000_0000_0000;
const VALID_STREAM: u64 = 0x7A11_0000_0000_0000;

/// SplitMix64 of two words: decorrelated sample seeds from one run seed.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything needed to run teacher pretraining, distillation and
/// fine-tuning end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeConfig {
    pub task: TaskConfig,
    pub teacher: ModelConfig,
    pub lawcat: LawcatConfig,
    pub lora: LoraConfig,
    pub pretrain: TrainConfig,
    pub distill: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        let teacher = ModelConfig::teacher(Vocab::get().len(), 32, 2, 2, 64, 1024);
        let mut lawcat = LawcatConfig::new(teacher.d_model, teacher.n_heads).expect("divisible dims");
        lawcat.d_feat = 32;
        let mut pretrain = TrainConfig::new(Stage::Pretrain);
        pretrain.max_steps = 2000;
        let mut distill = TrainConfig::new(Stage::Distill);
        distill.max_steps = 1000;
        let mut finetune = TrainConfig::new(Stage::Finetune);
        finetune.lr = 1e-3;
        finetune.max_steps = 500;
        Self {
            task: TaskConfig::default(),
            teacher,
            lawcat,
            lora: LoraConfig::default(),
            pretrain,
            distill,
            finetune,
        }
    }
}

impl RecipeConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.lawcat.validate()?;
        self.lora.validate()?;
        for t in [&self.pretrain, &self.distill, &self.finetune] {
            t.validate()?;
        }
        if self.teacher.vocab_size < Vocab::get().len() {
            return Err(Error::Config("teacher vocab is smaller than the task vocabulary".into()));
        }
        if self.task.curriculum.is_empty() || self.task.eval_lengths.is_empty() || self.task.n_eval == 0 {
            return Err(Error::Config("curriculum, eval_lengths and n_eval must be non-empty".into()));
        }
        let longest = self.task.eval_lengths.iter().chain(&self.task.curriculum).max().copied().unwrap_or(0);
        if longest.max(self.task.train_len) > self.teacher.max_seq {
            return Err(Error::Config(format!("max_seq {} is below the longest length used", self.teacher.max_seq)));
        }
        if self.lawcat.d_model != self.teacher.d_model || self.lawcat.n_heads != self.teacher.n_heads {
            return Err(Error::Config("lawcat dims differ from the teacher dims".into()));
        }
        Ok(())
    }
}

/// Named student variants, one per ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Default,
    NoNorm,
    NoConv,
    RopeOn,
    SwaOn,
    ShareConv,
    GateRank(usize),
}

pub const SWA_WINDOW: usize = 64;

impl Arm {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "default" => Self::Default,
            "no-norm" => Self::NoNorm,
            "no-conv" => Self::NoConv,
            "rope-on" => Self::RopeOn,
            "swa-on" => Self::SwaOn,
            "share-conv" => Self::ShareConv,
            _ => match s.strip_prefix("gate-rank=").map(str::parse) {
                Some(Ok(r)) if r > 0 => Self::GateRank(r),
                _ => return Err(Error::Config(format!("unknown ablation arm {s:?}"))),
            },
        })
    }

    pub fn name(&self) -> String {
        match self {
            Self::Default => "default".into(),
            Self::NoNorm => "no-norm".into(),
            Self::NoConv => "no-conv".into(),
            Self::RopeOn => "rope-on".into(),
            Self::SwaOn => "swa-on".into(),
            Self::ShareConv => "share-conv".into(),
            Self::GateRank(r) => format!("gate-rank={r}"),
        }
    }

    pub fn apply(&self, cfg: &mut LawcatConfig) {
        match *self {
            Self::Default => {}
            Self::NoNorm => cfg.normalize = false,
            Self::NoConv => cfg.use_conv = false,
            Self::RopeOn => cfg.use_rope = true,
            Self::SwaOn => cfg.hybrid_window = Some(SWA_WINDOW),
            Self::ShareConv => cfg.share_conv = true,
            Self::GateRank(r) => cfg.gate_rank = r,
        }
    }
}

/// JSON-lines training log. Wall-clock time goes to a separate stream so
/// the main log is reproducible byte for byte.
pub struct RunLog {
    log: Option<BufWriter<File>>,
    timing: Option<BufWriter<File>>,
    start: Instant,
    pub echo_every: usize,
}

impl RunLog {
    pub fn null() -> Self {
        Self {
            log: None,
            timing: None,
            start: Instant::now(),
            echo_every: 0,
        }
    }

    /// Writes `train.jsonl` and `timing.jsonl` under `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            log: Some(BufWriter::new(File::create(dir.join("train.jsonl"))?)),
            timing: Some(BufWriter::new(File::create(dir.join("timing.jsonl"))?)),
            start: Instant::now(),
            echo_every: 0,
        })
    }

    pub fn record(&mut self, stage: &str, seed: u64, step: usize, loss: f64, lr: f64) -> Result<()> {
        if let Some(w) = &mut self.log {
            let line = json!({"stage": stage, "step": step, "loss": loss, "lr": lr, "seed": seed});
            writeln!(w, "{line}")?;
        }
        if let Some(w) = &mut self.timing {
            let line = json!({"stage": stage, "step": step, "seed": seed, "wall_s": self.start.elapsed().as_secs_f64()});
            writeln!(w, "{line}")?;
        }
        if self.echo_every > 0 && step % self.echo_every == 0 {
            eprintln!("{stage} seed {seed} step {step} loss {loss:.6} lr {lr:.3e}");
        }
        Ok(())
    }

    pub fn event(&mut self, value: serde_json::Value) -> Result<()> {
        if let Some(w) = &mut self.log {
            writeln!(w, "{value}")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        for w in [&mut self.log, &mut self.timing].into_iter().flatten() {
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    /// Loss returned by the first step.
    pub first_loss: f64,
    /// Loss on the first step's batch after the last step.
    pub final_loss: f64,
}

impl StageReport {
    /// Fractional loss reduction, `1 - final/first`.
    pub fn drop(&self) -> f64 {
        if self.first_loss > 0.0 {
            1.0 - self.final_loss / self.first_loss
        } else {
            0.0
        }
    }
}

/// Accuracy per evaluated sequence length.
pub type AccuracyGrid = Vec<(usize, f64)>;

pub fn evaluate_lengths(model: &Model, task: &TaskConfig) -> Result<AccuracyGrid> {
    task.eval_lengths
        .iter()
        .map(|&len| Ok((len, evaluate(model, &task.eval_suite(len)?, task.answer_len())?)))
        .collect()
}

fn plateau_check(trainer: &mut Trainer, val: impl FnOnce() -> Result<f64>) -> Result<()> {
    if trainer.cfg.schedule == Schedule::ReduceOnPlateau && trainer.step % trainer.cfg.eval_every == 0 {
        trainer.observe(val()?);
    }
    Ok(())
}

/// Trains the softmax teacher from scratch on the task.
pub fn train_teacher(cfg: &RecipeConfig, log: &mut RunLog) -> Result<(Model, StageReport)> {
    cfg.validate()?;
    let tc = &cfg.pretrain;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut teacher = Model::init_teacher(cfg.teacher.clone(), &mut rng)?;
    let mut trainer = Trainer::new(tc.clone())?;
    let stream = mix(PRETRAIN_STREAM, tc.seed);
    let curriculum = &cfg.task.curriculum;
    let first_batch = cfg.task.train_batch(stream, 0, tc.batch_size, curriculum[0])?;
    let val = cfg.task.train_batch(mix(VALID_STREAM, tc.seed), 0, tc.batch_size, cfg.task.train_len)?;
    let mut first_loss = f64::NAN;
    for step in 0..tc.max_steps {
        let len = curriculum[step % curriculum.len()];
        let batch = if step == 0 {
            first_batch.clone()
        } else {
            cfg.task.train_batch(stream, step, tc.batch_size, len)?
        };
        let lr = trainer.lr();
        let loss = trainer.ce_step(&mut teacher, &batch)?;
        if step == 0 {
            first_loss = loss;
        }
        log.record(Stage::Pretrain.name(), tc.seed, step, loss, lr)?;
        plateau_check(&mut trainer, || ce_loss(&teacher, &val))?;
    }
    let final_loss = ce_loss(&teacher, &first_batch)?;
    log.flush()?;
    Ok((
        teacher,
        StageReport {
            stage: Stage::Pretrain,
            steps: tc.max_steps,
            first_loss,
            final_loss,
        },
    ))
}

/// Builds the student for `arm` around the teacher's weights and runs
/// layer-wise distillation.
pub fn distill_student(
    cfg: &RecipeConfig,
    teacher: &Model,
    arm: Arm,
    seed: u64,
    log: &mut RunLog,
) -> Result<(Model, StageReport)> {
    cfg.validate()?;
    let mut lc = cfg.lawcat.clone();
    arm.apply(&mut lc);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1));
    let mut student = Model::student_from_teacher(teacher, lc, &mut rng)?;
    let mut tc = cfg.distill.clone();
    tc.seed = seed;
    let mut trainer = Trainer::new(tc.clone())?;
    let stream = mix(DISTILL_STREAM, seed);
    let len = cfg.task.train_len;
    let first_batch = cfg.task.train_batch(stream, 0, tc.batch_size, len)?;
    let val = cfg.task.train_batch(mix(VALID_STREAM, seed), 1, tc.batch_size, len)?;
    let mut first_loss = f64::NAN;
    for step in 0..tc.max_steps {
        let batch = if step == 0 {
            first_batch.clone()
        } else {
            cfg.task.train_batch(stream, step, tc.batch_size, len)?
        };
        let lr = trainer.lr();
        let loss = trainer.distill_step(teacher, &mut student, &batch)?;
        if step == 0 {
            first_loss = loss;
        }
        log.record(Stage::Distill.name(), seed, step, loss, lr)?;
        plateau_check(&mut trainer, || distill_loss(teacher, &student, &val))?;
    }
    let final_loss = if tc.max_steps == 0 {
        first_loss
    } else {
        distill_loss(teacher, &student, &first_batch)?
    };
    log.flush()?;
    Ok((
        student,
        StageReport {
            stage: Stage::Distill,
            steps: tc.max_steps,
            first_loss,
            final_loss,
        },
    ))
}

/// Attaches LoRA adapters and fine-tunes on the answer-span loss.
pub fn finetune_student(cfg: &RecipeConfig, student: &mut Model, seed: u64, log: &mut RunLog) -> Result<StageReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2));
    if student.cfg.lora.is_none() {
        student.attach_lora(cfg.lora, &mut rng)?;
    }
    let mut tc = cfg.finetune.clone();
    tc.seed = seed;
    let mut trainer = Trainer::new(tc.clone())?;
    let stream = mix(FINETUNE_STREAM, seed);
    let len = cfg.task.train_len;
    let first_batch = cfg.task.train_batch(stream, 0, tc.batch_size, len)?;
    let val = cfg.task.train_batch(mix(VALID_STREAM, seed), 2, tc.batch_size, len)?;
    let mut first_loss = f64::NAN;
    for step in 0..tc.max_steps {
        let batch = if step == 0 {
            first_batch.clone()
        } else {
            cfg.task.train_batch(stream, step, tc.batch_size, len)?
        };
        let lr = trainer.lr();
        let loss = trainer.finetune_step(student, &batch)?;
        if step == 0 {
            first_loss = loss;
        }
        log.record(Stage::Finetune.name(), seed, step, loss, lr)?;
        plateau_check(&mut trainer, || ce_loss(student, &val))?;
    }
    let final_loss = if tc.max_steps == 0 {
        first_loss
    } else {
        ce_loss(student, &first_batch)?
    };
    log.flush()?;
    Ok(StageReport {
        stage: Stage::Finetune,
        steps: tc.max_steps,
        first_loss,
        final_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub arm: String,
    pub seed: u64,
    pub distill: StageReport,
    pub finetune: StageReport,
    pub accuracy: AccuracyGrid,
}

/// Distillation, fine-tuning and evaluation of one student.
pub fn run_student(
    cfg: &RecipeConfig,
    teacher: &Model,
    arm: Arm,
    seed: u64,
    log: &mut RunLog,
) -> Result<(Model, RecipeReport)> {
    let (mut student, distill) = distill_student(cfg, teacher, arm, seed, log)?;
    let finetune = finetune_student(cfg, &mut student, seed, log)?;
    let accuracy = evaluate_lengths(&student, &cfg.task)?;
    log.event(json!({"event": "eval", "arm": arm.name(), "seed": seed, "accuracy": accuracy}))?;
    log.flush()?;
    Ok((
        student,
        RecipeReport {
            arm: arm.name(),
            seed,
            distill,
            finetune,
            accuracy,
        },
    ))
}

/// Several seeds of one arm with the best run (highest accuracy at the
/// first evaluated length, ties broken by the later lengths) and the
/// per-length median.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub arm: String,
    pub runs: Vec<RecipeReport>,
    pub best: usize,
    pub median: AccuracyGrid,
    pub mean: AccuracyGrid,
}

impl SweepReport {
    pub fn from_runs(arm: String, runs: Vec<RecipeReport>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Config("a seed sweep needs at least one seed".into()));
        }
        let key = |r: &RecipeReport| r.accuracy.iter().map(|(_, a)| *a).collect::<Vec<_>>();
        let mut best = 0;
        for i in 1..runs.len() {
            if key(&runs[i]) > key(&runs[best]) {
                best = i;
            }
        }
        let lengths: Vec<usize> = runs[0].accuracy.iter().map(|(l, _)| *l).collect();
        let column = |j: usize| -> Vec<f64> { runs.iter().map(|r| r.accuracy[j].1).collect() };
        let median = lengths
            .iter()
            .enumerate()
            .map(|(j, &l)| (l, median(column(j))))
            .collect();
        let mean = lengths
            .iter()
            .enumerate()
            .map(|(j, &l)| (l, column(j).iter().sum::<f64>() / runs.len() as f64))
            .collect();
        Ok(Self { arm, runs, best, median, mean })
    }

    pub fn best_run(&self) -> &RecipeReport {
        &self.runs[self.best]
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn run_seeds(cfg: &RecipeConfig, teacher: &Model, arm: Arm, seeds: &[u64], log: &mut RunLog) -> Result<SweepReport> {
    let runs = seeds
        .iter()
        .map(|&s| run_student(cfg, teacher, arm, s, log).map(|(_, r)| r))
        .collect::<Result<Vec<_>>>()?;
    SweepReport::from_runs(arm.name(), runs)
}
