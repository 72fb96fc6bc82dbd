//! Desk-scale pre-norm transformers: a softmax-attention teacher and a
//! LAWCAT student that shares every non-attention weight with it.

mod check;
mod lora;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

pub use check::student_grad_check;
pub use lora::{lora_apply, LoraAdapter, LoraConfig, LoraTarget};

use crate::attn_ref::{rope_op, softmax_attention_op};
use crate::checkpoint::{self, TensorMap};
use crate::lawcat::{lawcat_attention_op, LawcatConfig, LawcatParams, LawcatVars, ScanMode};
use crate::numerics::{Binder, Linear, Tape, Tensor, Var};
use crate::{Error, Result};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    SoftmaxTeacher,
    LawcatStudent,
}

fn default_theta() -> f64 {
    10_000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub attn_kind: AttnKind,
    #[serde(default)]
    pub tie_embeddings: bool,
    /// RoPE base of the softmax teacher.
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default)]
    pub lawcat: Option<LawcatConfig>,
    /// Present once adapters are attached.
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

impl ModelConfig {
    pub fn teacher(vocab_size: usize, d_model: usize, n_layers: usize, n_heads: usize, d_ff: usize, max_seq: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_seq,
            attn_kind: AttnKind::SoftmaxTeacher,
            tie_embeddings: false,
            rope_theta: default_theta(),
            lawcat: None,
            lora: None,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.d_ff == 0 || self.max_seq == 0 {
            return Err(Error::Config("d_ff and max_seq must be >= 1".into()));
        }
        if self.attn_kind == AttnKind::SoftmaxTeacher && self.d_head() % 2 != 0 {
            return Err(Error::Config("the teacher uses rope and needs an even head dim".into()));
        }
        match (&self.lawcat, self.attn_kind) {
            (None, AttnKind::LawcatStudent) => {
                return Err(Error::Config("student config needs lawcat hyperparameters".into()))
            }
            (Some(l), AttnKind::LawcatStudent) => {
                if l.d_model != self.d_model || l.n_heads != self.n_heads || l.d_head != self.d_head() {
                    return Err(Error::Config("lawcat dims differ from the model dims".into()));
                }
                l.validate()?;
            }
            _ => {}
        }
        if let Some(l) = &self.lora {
            l.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttnParams {
    Softmax { wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor },
    Lawcat(LawcatParams),
}

impl AttnParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Self::Softmax { wq, wk, wv, wo } => vec![("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)],
            Self::Lawcat(p) => p.named(),
        }
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Self::Softmax { wq, wk, wv, wo } => {
                vec![("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)]
            }
            Self::Lawcat(p) => p.named_mut(),
        }
    }

    pub fn projection(&self, target: LoraTarget) -> &Tensor {
        let (wq, wk, wv, wo) = match self {
            Self::Softmax { wq, wk, wv, wo } => (wq, wk, wv, wo),
            Self::Lawcat(p) => (&p.wq, &p.wk, &p.wv, &p.wo),
        };
        match target {
            LoraTarget::Q => wq,
            LoraTarget::K => wk,
            LoraTarget::V => wv,
            LoraTarget::O => wo,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: Tensor,
    pub attn: AttnParams,
    pub lora: BTreeMap<LoraTarget, LoraAdapter>,
    pub norm2: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm_f: Tensor,
    /// `None` when the output head reuses the embedding.
    pub head: Option<Tensor>,
}

/// Tape handles produced by [`Model::forward_op`].
pub struct ForwardVars {
    pub logits: Var,
    /// Normalized hidden state entering each attention block.
    pub attn_inputs: Vec<Var>,
    /// Attention block output after the output projection, before the
    /// residual add.
    pub attn_outputs: Vec<Var>,
}

/// Plain-value forward result.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub attn_inputs: Vec<Tensor>,
    pub attn_outputs: Vec<Tensor>,
}

fn randn(shape: [usize; 2], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl Model {
    /// Fresh softmax teacher.
    pub fn init_teacher(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.attn_kind != AttnKind::SoftmaxTeacher {
            return Err(Error::Config("init_teacher needs attn_kind softmax_teacher".into()));
        }
        cfg.validate()?;
        let d = cfg.d_model;
        let out_std_fix = 1.0 / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let embed = Tensor::randn([cfg.vocab_size, d], 1.0, rng);
        let blocks = (0..cfg.n_layers)
            .map(|_| {
                let attn = AttnParams::Softmax {
                    wq: randn([d, d], d, rng),
                    wk: randn([d, d], d, rng),
                    wv: randn([d, d], d, rng),
                    wo: randn([d, d], d, rng).map(|x| x * out_std_fix),
                };
                Block {
                    norm1: Tensor::full([d], 1.0),
                    attn,
                    lora: BTreeMap::new(),
                    norm2: Tensor::full([d], 1.0),
                    w_gate: randn([d, cfg.d_ff], d, rng),
                    w_up: randn([d, cfg.d_ff], d, rng),
                    w_down: randn([cfg.d_ff, d], cfg.d_ff, rng).map(|x| x * out_std_fix),
                }
            })
            .collect();
        let head = (!cfg.tie_embeddings).then(|| randn([d, cfg.vocab_size], d, rng));
        Ok(Self {
            embed,
            blocks,
            norm_f: Tensor::full([d], 1.0),
            head,
            cfg,
        })
    }

    /// Student with the teacher's embedding, norms, MLPs, head and attention
    /// projections; only the LAWCAT internals are new.
    pub fn student_from_teacher(teacher: &Model, lawcat: LawcatConfig, rng: &mut impl Rng) -> Result<Self> {
        if teacher.cfg.attn_kind != AttnKind::SoftmaxTeacher {
            return Err(Error::Config("student_from_teacher needs a softmax teacher".into()));
        }
        let mut cfg = teacher.cfg.clone();
        cfg.attn_kind = AttnKind::LawcatStudent;
        cfg.lawcat = Some(lawcat.clone());
        cfg.lora = None;
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(teacher.blocks.len());
        for b in &teacher.blocks {
            let AttnParams::Softmax { wq, wk, wv, wo } = &b.attn else {
                return Err(Error::Config("teacher block without softmax attention".into()));
            };
            let p = LawcatParams::from_projections(&lawcat, wq.clone(), wk.clone(), wv.clone(), wo.clone(), rng)?;
            blocks.push(Block {
                attn: AttnParams::Lawcat(p),
                lora: BTreeMap::new(),
                ..b.clone()
            });
        }
        Ok(Self {
            cfg,
            embed: teacher.embed.clone(),
            blocks,
            norm_f: teacher.norm_f.clone(),
            head: teacher.head.clone(),
        })
    }

    /// Adds zero-initialized adapters on q, k, v and o of every layer.
    pub fn attach_lora(&mut self, cfg: LoraConfig, rng: &mut impl Rng) -> Result<()> {
        cfg.validate()?;
        self.cfg.lora = Some(cfg);
        for b in &mut self.blocks {
            for t in LoraTarget::ALL {
                let w = b.attn.projection(t);
                let (din, dout) = w.dims2()?;
                b.lora.insert(t, LoraAdapter::new(t, din, dout, cfg, rng)?);
            }
        }
        Ok(())
    }

    pub fn is_student(&self) -> bool {
        self.cfg.attn_kind == AttnKind::LawcatStudent
    }

    /// Every parameter with its qualified name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{i}.norm1"), &b.norm1));
            for (n, t) in b.attn.named() {
                out.push((format!("layers.{i}.attn.{n}"), t));
            }
            for (t, a) in &b.lora {
                out.push((format!("layers.{i}.lora.{}.a", t.name()), &a.a));
                out.push((format!("layers.{i}.lora.{}.b", t.name()), &a.b));
            }
            out.push((format!("layers.{i}.norm2"), &b.norm2));
            out.push((format!("layers.{i}.mlp.w_gate"), &b.w_gate));
            out.push((format!("layers.{i}.mlp.w_up"), &b.w_up));
            out.push((format!("layers.{i}.mlp.w_down"), &b.w_down));
        }
        out.push(("norm_f".to_string(), &self.norm_f));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layers.{i}.norm1"), &mut b.norm1));
            for (n, t) in b.attn.named_mut() {
                out.push((format!("layers.{i}.attn.{n}"), t));
            }
            for (t, a) in &mut b.lora {
                out.push((format!("layers.{i}.lora.{}.a", t.name()), &mut a.a));
                out.push((format!("layers.{i}.lora.{}.b", t.name()), &mut a.b));
            }
            out.push((format!("layers.{i}.norm2"), &mut b.norm2));
            out.push((format!("layers.{i}.mlp.w_gate"), &mut b.w_gate));
            out.push((format!("layers.{i}.mlp.w_up"), &mut b.w_up));
            out.push((format!("layers.{i}.mlp.w_down"), &mut b.w_down));
        }
        out.push(("norm_f".to_string(), &mut self.norm_f));
        if let Some(h) = &mut self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn tensor_map(&self) -> TensorMap {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Overwrites every parameter from `map`, which must hold exactly the
    /// model's names and shapes.
    pub fn load_tensor_map(&mut self, map: &TensorMap) -> Result<()> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != map.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                map.len(),
                names.len()
            )));
        }
        for (name, t) in self.named_mut() {
            let src = map
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape("load_tensor_map", t.shape(), src.shape()));
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Writes `model.ckpt` and `model_config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join("model.ckpt"), &self.tensor_map())?;
        let cfg = serde_json::to_string_pretty(&self.cfg)?;
        std::fs::write(dir.join("model_config.json"), cfg + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("model_config.json"))?)?;
        let map = checkpoint::load(&dir.join("model.ckpt"))?;
        Self::from_parts(cfg, &map)
    }

    /// Rebuilds a model of configuration `cfg` from named tensors.
    pub fn from_parts(cfg: ModelConfig, map: &TensorMap) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let teacher_cfg = ModelConfig {
            attn_kind: AttnKind::SoftmaxTeacher,
            lawcat: None,
            lora: None,
            ..cfg.clone()
        };
        let shell = Model::init_teacher(teacher_cfg, &mut rng)?;
        let mut model = match &cfg.lawcat {
            Some(l) if cfg.attn_kind == AttnKind::LawcatStudent => Model::student_from_teacher(&shell, l.clone(), &mut rng)?,
            _ => shell,
        };
        if let Some(l) = cfg.lora {
            model.attach_lora(l, &mut rng)?;
        }
        model.cfg = cfg;
        model.load_tensor_map(map)?;
        Ok(model)
    }

    fn check_tokens(&self, tokens: &[usize], seq_len: usize) -> Result<()> {
        if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
            return Err(Error::Input(format!(
                "{} tokens do not split into sequences of {seq_len}",
                tokens.len()
            )));
        }
        if seq_len > self.cfg.max_seq {
            return Err(Error::Input(format!(
                "sequence length {seq_len} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} >= vocab_size {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn bind_linear(
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        base: Linear,
        adapter: Option<&LoraAdapter>,
    ) -> Result<Linear> {
        Ok(match adapter {
            None => base,
            Some(a) => {
                let t = a.target.name();
                let av = binder.bind(tape, &format!("{prefix}lora.{t}.a"), &a.a)?;
                let bv = binder.bind(tape, &format!("{prefix}lora.{t}.b"), &a.b)?;
                Linear {
                    w: base.w,
                    lora: Some((av, bv, a.scale())),
                }
            }
        })
    }

    /// Attention sub-block of layer `layer` applied to the normalized input
    /// `h: [n_seq·seq_len, d_model]`.
    pub fn attn_op(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        layer: usize,
        h: Var,
        seq_len: usize,
        mode: ScanMode,
    ) -> Result<Var> {
        let b = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} out of range")))?;
        let prefix = format!("layers.{layer}.");
        let attn_prefix = format!("{prefix}attn.");
        let lora = |t| b.lora.get(&t);
        match &b.attn {
            AttnParams::Softmax { wq, wk, wv, wo } => {
                let mut bind = |name: &str, w: &Tensor| binder.bind(tape, &format!("{attn_prefix}{name}"), w);
                let (q, k, v, o) = (bind("wq", wq)?, bind("wk", wk)?, bind("wv", wv)?, bind("wo", wo)?);
                let q = Self::bind_linear(tape, binder, &prefix, Linear::plain(q), lora(LoraTarget::Q))?;
                let k = Self::bind_linear(tape, binder, &prefix, Linear::plain(k), lora(LoraTarget::K))?;
                let v = Self::bind_linear(tape, binder, &prefix, Linear::plain(v), lora(LoraTarget::V))?;
                let o = Self::bind_linear(tape, binder, &prefix, Linear::plain(o), lora(LoraTarget::O))?;
                let (nh, theta) = (self.cfg.n_heads, self.cfg.rope_theta);
                let qv = q.apply(tape, h)?;
                let kv = k.apply(tape, h)?;
                let vv = v.apply(tape, h)?;
                let qv = rope_op(tape, qv, seq_len, nh, theta, 0)?;
                let kv = rope_op(tape, kv, seq_len, nh, theta, 0)?;
                let scale = 1.0 / (self.cfg.d_head() as f64).sqrt();
                let a = softmax_attention_op(tape, qv, kv, vv, seq_len, nh, scale, None)?;
                o.apply(tape, a)
            }
            AttnParams::Lawcat(p) => {
                let lcfg = self.cfg.lawcat.as_ref().ok_or_else(|| Error::Config("missing lawcat config".into()))?;
                let mut vars = LawcatVars::bind(tape, binder, &attn_prefix, p, lcfg)?;
                vars.q = Self::bind_linear(tape, binder, &prefix, vars.q, lora(LoraTarget::Q))?;
                vars.k = Self::bind_linear(tape, binder, &prefix, vars.k, lora(LoraTarget::K))?;
                vars.v = Self::bind_linear(tape, binder, &prefix, vars.v, lora(LoraTarget::V))?;
                vars.o = Self::bind_linear(tape, binder, &prefix, vars.o, lora(LoraTarget::O))?;
                lawcat_attention_op(tape, lcfg, &vars, h, seq_len, mode)
            }
        }
    }

    /// Forward pass over `tokens`, which hold `tokens.len() / seq_len`
    /// stacked sequences.
    pub fn forward_op(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        tokens: &[usize],
        seq_len: usize,
        mode: ScanMode,
    ) -> Result<ForwardVars> {
        self.check_tokens(tokens, seq_len)?;
        let embed = binder.bind(tape, "embed", &self.embed)?;
        let mut x = tape.gather_rows(embed, tokens)?;
        let mut attn_inputs = Vec::with_capacity(self.blocks.len());
        let mut attn_outputs = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let n1 = binder.bind(tape, &format!("layers.{i}.norm1"), &b.norm1)?;
            let h = tape.rms_norm(x, n1, NORM_EPS)?;
            let a = self.attn_op(tape, binder, i, h, seq_len, mode)?;
            attn_inputs.push(h);
            attn_outputs.push(a);
            x = tape.add(x, a)?;
            let n2 = binder.bind(tape, &format!("layers.{i}.norm2"), &b.norm2)?;
            let h2 = tape.rms_norm(x, n2, NORM_EPS)?;
            let wg = binder.bind(tape, &format!("layers.{i}.mlp.w_gate"), &b.w_gate)?;
            let wu = binder.bind(tape, &format!("layers.{i}.mlp.w_up"), &b.w_up)?;
            let wd = binder.bind(tape, &format!("layers.{i}.mlp.w_down"), &b.w_down)?;
            let gate = tape.matmul(h2, wg)?;
            let gate = tape.silu(gate)?;
            let up = tape.matmul(h2, wu)?;
            let m = tape.mul(gate, up)?;
            let m = tape.matmul(m, wd)?;
            x = tape.add(x, m)?;
        }
        let nf = binder.bind(tape, "norm_f", &self.norm_f)?;
        let hf = tape.rms_norm(x, nf, NORM_EPS)?;
        let logits = match &self.head {
            Some(h) => {
                let hv = binder.bind(tape, "head", h)?;
                tape.matmul(hf, hv)?
            }
            None => {
                let et = tape.transpose(embed)?;
                tape.matmul(hf, et)?
            }
        };
        Ok(ForwardVars {
            logits,
            attn_inputs,
            attn_outputs,
        })
    }

    /// Forward pass of stacked sequences without gradients.
    pub fn forward_batch(&self, tokens: &[usize], seq_len: usize, mode: ScanMode) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen();
        let f = self.forward_op(&mut tape, &mut binder, tokens, seq_len, mode)?;
        Ok(ForwardOutput {
            logits: tape.value(f.logits).clone(),
            attn_inputs: f.attn_inputs.iter().map(|v| tape.value(*v).clone()).collect(),
            attn_outputs: f.attn_outputs.iter().map(|v| tape.value(*v).clone()).collect(),
        })
    }

    /// Forward pass of one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardOutput> {
        self.forward_batch(tokens, tokens.len(), ScanMode::Recurrent)
    }

    /// Greedy continuation of prompts of equal length, `max_new` tokens each.
    pub fn greedy_batch(&self, prompts: &[Vec<usize>], max_new: usize) -> Result<Vec<Vec<usize>>> {
        let Some(first) = prompts.first() else {
            return Ok(Vec::new());
        };
        let len = first.len();
        if prompts.iter().any(|p| p.len() != len) {
            return Err(Error::Input("greedy_batch needs prompts of equal length".into()));
        }
        let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
        for _ in 0..max_new {
            let n = seqs[0].len();
            let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
            let out = self.forward_batch(&flat, n, ScanMode::Recurrent)?;
            for (s, seq) in seqs.iter_mut().enumerate() {
                let row = out.logits.row(s * n + n - 1);
                seq.push(argmax(row));
            }
        }
        Ok(seqs.into_iter().map(|s| s[len..].to_vec()).collect())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

