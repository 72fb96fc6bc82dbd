use std::path::Path;

use lawcat::bench::{BenchConfig, Impl};
use lawcat::distill::{AdamWConfig, RecipeConfig, Schedule, Stage, TaskConfig, TrainConfig};
use lawcat::lawcat::{FeatureKind, LawcatConfig};
use lawcat::model::{LoraConfig, ModelConfig};
use lawcat::tasks::{TaskKind, Vocab};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

pub const DEFAULT_TOML: &str = include_str!("default.toml");

/// Problems with the configuration itself. These map to the usage exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type CfgResult<T> = Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> CfgResult<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub model: ModelSection,
    pub lawcat: LawcatSection,
    pub lora: LoraSection,
    pub task: TaskSection,
    pub pretrain: StageSection,
    pub distill: StageSection,
    pub finetune: StageSection,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub rope_theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawcatSection {
    pub d_feat: usize,
    pub conv_width: usize,
    pub gate_rank: usize,
    pub feature_kind: FeatureKind,
    pub normalize: bool,
    pub use_conv: bool,
    pub share_conv: bool,
    pub use_rope: bool,
    pub swa_window: usize,
    pub gate_init: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub task: TaskKind,
    pub train_len: usize,
    pub key_digits: usize,
    pub curriculum: Vec<usize>,
    pub eval_lengths: Vec<usize>,
    pub n_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub lr: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub max_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub eval_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_projections: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub swa_window: usize,
    pub chunk: usize,
    pub warmup: usize,
    pub memory_budget_mb: usize,
    pub check_up_to: usize,
    pub impls: Vec<Impl>,
}

/// Recursively overlays `over` onto `base`. Keys missing from `base` are
/// rejected so that typos surface instead of being ignored.
pub fn merge(base: &mut Table, over: &Table, prefix: &str) -> CfgResult<()> {
    for (k, v) in over {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(k), v) {
            (None, _) => return err(format!("unknown config key {path}")),
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o, &path)?,
            (Some(Value::Table(_)), _) => return err(format!("config key {path} is a section")),
            (Some(slot), _) => *slot = v.clone(),
        }
    }
    Ok(())
}

fn parse_file(path: &Path) -> CfgResult<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        match Value::try_from(json) {
            Ok(Value::Table(t)) => Ok(t),
            Ok(_) => err(format!("{}: top level must be an object", path.display())),
            Err(e) => err(format!("{}: {e}", path.display())),
        }
    } else {
        text.parse::<Table>().map_err(|e| ConfigError(format!("{}: {}", path.display(), e.message())))
    }
}

/// Turns `a.b=v` into a nested table. The value is read as a TOML literal,
/// falling back to a bare string.
fn parse_set(expr: &str) -> CfgResult<Table> {
    let Some((key, raw)) = expr.split_once('=') else {
        return err(format!("--set expects key=value, got {expr:?}"));
    };
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return err(format!("bad config key {key:?}"));
    }
    let last = parts.pop().unwrap();
    let mut table = Table::new();
    table.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(table));
        table = outer;
    }
    Ok(table)
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> CfgResult<Self> {
        let mut table: Table = DEFAULT_TOML.parse().expect("embedded defaults parse");
        if let Some(path) = file {
            merge(&mut table, &parse_file(path)?, "")?;
        }
        for s in sets {
            merge(&mut table, &parse_set(s)?, "")?;
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(e.message().to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CfgResult<()> {
        for (name, s) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if s.train_projections.is_some() {
                return err(format!("unknown config key {name}.train_projections"));
            }
        }
        if self.seeds.is_empty() {
            return err("seeds must not be empty");
        }
        let recipe = self.recipe().map_err(|e| ConfigError(e.to_string()))?;
        recipe.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form of the
    /// config together with `extra`. The seed is left out; run directories
    /// carry it separately.
    pub fn hash(&self, extra: &serde_json::Value) -> String {
        let mut config = serde_json::to_value(self).expect("json");
        config.as_object_mut().expect("object").remove("seed");
        let canon = serde_json::to_string(&serde_json::json!({"config": config, "args": extra})).expect("json");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn lawcat_config(&self) -> lawcat::Result<LawcatConfig> {
        let l = &self.lawcat;
        let mut c = LawcatConfig::new(self.model.d_model, self.model.n_heads)?;
        c.d_feat = l.d_feat;
        c.conv_width = l.conv_width;
        c.gate_rank = l.gate_rank;
        c.feature_kind = l.feature_kind;
        c.normalize = l.normalize;
        c.use_conv = l.use_conv;
        c.share_conv = l.share_conv;
        c.use_rope = l.use_rope;
        c.hybrid_window = (l.swa_window > 0).then_some(l.swa_window);
        c.gate_init = l.gate_init;
        c.eps = l.eps;
        Ok(c)
    }

    fn train_config(&self, stage: Stage, s: &StageSection) -> TrainConfig {
        let mut t = TrainConfig::new(stage);
        t.lr = s.lr;
        t.schedule = s.schedule;
        t.batch_size = s.batch_size;
        t.max_steps = s.max_steps;
        t.adamw = AdamWConfig {
            weight_decay: s.weight_decay,
            ..AdamWConfig::default()
        };
        t.grad_clip = (s.grad_clip > 0.0).then_some(s.grad_clip);
        t.plateau_patience = s.plateau_patience;
        t.plateau_factor = s.plateau_factor;
        t.eval_every = s.eval_every;
        t.train_projections = s.train_projections.unwrap_or(false);
        t.seed = self.seed;
        t
    }

    pub fn recipe(&self) -> lawcat::Result<RecipeConfig> {
        let m = &self.model;
        let mut teacher = ModelConfig::teacher(Vocab::get().len(), m.d_model, m.n_layers, m.n_heads, m.d_ff, m.max_seq);
        teacher.rope_theta = m.rope_theta;
        let t = &self.task;
        Ok(RecipeConfig {
            task: TaskConfig {
                task: t.task,
                train_len: t.train_len,
                key_digits: t.key_digits,
                curriculum: t.curriculum.clone(),
                eval_lengths: t.eval_lengths.clone(),
                n_eval: t.n_eval,
            },
            teacher,
            lawcat: self.lawcat_config()?,
            lora: LoraConfig {
                rank: self.lora.rank,
                alpha: self.lora.alpha,
            },
            pretrain: self.train_config(Stage::Pretrain, &self.pretrain),
            distill: self.train_config(Stage::Distill, &self.distill),
            finetune: self.train_config(Stage::Finetune, &self.finetune),
        })
    }

    pub fn bench_config(&self) -> BenchConfig {
        let b = &self.bench;
        BenchConfig {
            d_model: b.d_model,
            n_heads: b.n_heads,
            n_layers: b.n_layers,
            swa_window: b.swa_window,
            chunk: b.chunk,
            warmup: b.warmup,
            seed: self.seed,
            memory_budget_bytes: b.memory_budget_mb << 20,
            check_up_to: b.check_up_to,
            impls: b.impls.clone(),
        }
    }
}
