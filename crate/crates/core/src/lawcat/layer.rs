//! The full attention layer: projections, convolution, feature map, gate,
//! gated linear attention and output projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{causal_conv1d, causal_conv1d_op, identity_kernel, ConvRing};
use super::feature::FeatureKind;
use super::gate::init_gate_bias;
use super::gla::{gla_op, GlaOptions, GlaState, ScanMode, DEFAULT_EPS};
use super::hybrid::{hybrid_op, hybrid_step_heads, HybridHead};
use crate::attn_ref::{rope_apply_heads, rope_op, softmax_attention_op};
use crate::numerics::{add, concat, matmul, sigmoid, slice, Binder, Linear, Tape, Tensor, Var};
use crate::{Error, Result};

fn default_conv_width() -> usize {
    4
}
fn default_gate_rank() -> usize {
    32
}
fn default_true() -> bool {
    true
}
fn default_theta() -> f64 {
    10_000.0
}
fn default_eps() -> f64 {
    DEFAULT_EPS
}
fn default_gate_init() -> f64 {
    0.95
}

/// Hyperparameters of one LAWCAT attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawcatConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_feat: usize,
    /// Kernel size `r + 1`.
    #[serde(default = "default_conv_width")]
    pub conv_width: usize,
    #[serde(default = "default_gate_rank")]
    pub gate_rank: usize,
    #[serde(default)]
    pub share_conv: bool,
    #[serde(default = "default_true")]
    pub share_linear: bool,
    #[serde(default)]
    pub use_rope: bool,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default)]
    pub hybrid_window: Option<usize>,
    #[serde(default)]
    pub feature_kind: FeatureKind,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default = "default_true")]
    pub use_conv: bool,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Value every gate starts near.
    #[serde(default = "default_gate_init")]
    pub gate_init: f64,
    /// Replaces the linear branch by RoPE + causal softmax on the same
    /// projections. Only meant for tests.
    #[serde(skip)]
    pub softmax_bypass: bool,
}

impl LawcatConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let d_head = d_model / n_heads;
        Ok(Self {
            d_model,
            n_heads,
            d_head,
            d_feat: d_head,
            conv_width: default_conv_width(),
            gate_rank: default_gate_rank(),
            share_conv: false,
            share_linear: true,
            use_rope: false,
            rope_theta: default_theta(),
            hybrid_window: None,
            feature_kind: FeatureKind::default(),
            normalize: true,
            use_conv: true,
            eps: DEFAULT_EPS,
            gate_init: default_gate_init(),
            softmax_bypass: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_feat", self.d_feat),
            ("conv_width", self.conv_width),
            ("gate_rank", self.gate_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.hybrid_window == Some(0) {
            return Err(Error::Config("hybrid window must be >= 1".into()));
        }
        if self.use_rope && self.d_head % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even head dim, got {}", self.d_head)));
        }
        if !(self.gate_init > 0.0 && self.gate_init < 1.0) {
            return Err(Error::Config(format!("gate_init {} outside (0,1)", self.gate_init)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    fn inner(&self) -> usize {
        self.n_heads * self.d_head
    }

    fn scale(&self) -> f64 {
        1.0 / (self.d_head as f64).sqrt()
    }

    fn gla_options(&self) -> GlaOptions {
        GlaOptions {
            normalize: self.normalize,
            eps: self.eps,
        }
    }
}

/// Learnable tensors of one layer. Per-head factors are stacked along rows:
/// `w_phi` is `[n_heads·d_head, d_feat]`, `gate_w2` is
/// `[n_heads·gate_rank, d_feat]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LawcatParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub conv_q: Tensor,
    /// `None` when the key convolution reuses `conv_q`.
    pub conv_k: Option<Tensor>,
    pub w_phi: Tensor,
    /// `None` when keys reuse `w_phi`.
    pub w_phi_k: Option<Tensor>,
    pub gate_w1: Tensor,
    pub gate_w2: Tensor,
    pub gate_b: Tensor,
}

impl LawcatParams {
    /// Fresh layer with random projections.
    pub fn init(cfg: &LawcatConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, i) = (cfg.d_model, cfg.inner());
        let wq = Tensor::randn([d, i], 1.0 / (d as f64).sqrt(), rng);
        let wk = Tensor::randn([d, i], 1.0 / (d as f64).sqrt(), rng);
        let wv = Tensor::randn([d, i], 1.0 / (d as f64).sqrt(), rng);
        let wo = Tensor::randn([i, d], 1.0 / (i as f64).sqrt(), rng);
        Self::from_projections(cfg, wq, wk, wv, wo, rng)
    }

    /// Layer around existing attention projections; only the convolution,
    /// feature and gate parameters are new.
    pub fn from_projections(
        cfg: &LawcatConfig,
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        wo: Tensor,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, i) = (cfg.d_model, cfg.inner());
        for (w, shape) in [(&wq, [d, i]), (&wk, [d, i]), (&wv, [d, i]), (&wo, [i, d])] {
            if w.shape() != shape {
                return Err(Error::shape("lawcat_params", w.shape(), &shape));
            }
        }
        let (h, f, r) = (cfg.n_heads, cfg.d_feat, cfg.gate_rank);
        let w_phi = Tensor::randn([i, f], 0.02, rng);
        let w_phi_k = (!cfg.share_linear).then(|| Tensor::randn([i, f], 0.02, rng));
        let gate_w1 = Tensor::randn([d, h * r], 0.02, rng);
        let gate_w2 = Tensor::randn([h * r, f], 0.02, rng);
        let gate_b = Tensor::full([h * f], init_gate_bias(cfg.gate_init));
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            conv_q: identity_kernel(i, cfg.conv_width),
            conv_k: (!cfg.share_conv).then(|| identity_kernel(i, cfg.conv_width)),
            w_phi,
            w_phi_k,
            gate_w1,
            gate_w2,
            gate_b,
        })
    }

    /// Named tensors, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("conv_q", &self.conv_q),
        ];
        if let Some(c) = &self.conv_k {
            out.push(("conv_k", c));
        }
        out.push(("w_phi", &self.w_phi));
        if let Some(w) = &self.w_phi_k {
            out.push(("w_phi_k", w));
        }
        out.push(("gate_w1", &self.gate_w1));
        out.push(("gate_w2", &self.gate_w2));
        out.push(("gate_b", &self.gate_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("conv_q", &mut self.conv_q),
        ];
        if let Some(c) = &mut self.conv_k {
            out.push(("conv_k", c));
        }
        out.push(("w_phi", &mut self.w_phi));
        if let Some(w) = &mut self.w_phi_k {
            out.push(("w_phi_k", w));
        }
        out.push(("gate_w1", &mut self.gate_w1));
        out.push(("gate_w2", &mut self.gate_w2));
        out.push(("gate_b", &mut self.gate_b));
        out
    }

    fn conv_k(&self) -> &Tensor {
        self.conv_k.as_ref().unwrap_or(&self.conv_q)
    }

    fn w_phi_k(&self) -> &Tensor {
        self.w_phi_k.as_ref().unwrap_or(&self.w_phi)
    }
}

/// Whether a parameter name refers to the attention projections, as opposed
/// to the convolution, feature and gate internals.
pub fn is_projection(name: &str) -> bool {
    matches!(name, "wq" | "wk" | "wv" | "wo")
}

/// Layer parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct LawcatVars {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub conv_q: Option<Var>,
    pub conv_k: Option<Var>,
    pub w_phi: Option<Var>,
    pub w_phi_k: Option<Var>,
    pub gate_w1: Option<Var>,
    pub gate_w2: Option<Var>,
    pub gate_b: Option<Var>,
}

impl LawcatVars {
    /// Binds the tensors the configured forward pass reads, under
    /// `prefix` + name.
    pub fn bind(
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        p: &LawcatParams,
        cfg: &LawcatConfig,
    ) -> Result<Self> {
        let mut b = |name: &str, t: &Tensor| binder.bind(tape, &format!("{prefix}{name}"), t);
        let q = Linear::plain(b("wq", &p.wq)?);
        let k = Linear::plain(b("wk", &p.wk)?);
        let v = Linear::plain(b("wv", &p.wv)?);
        let o = Linear::plain(b("wo", &p.wo)?);
        if cfg.softmax_bypass {
            return Ok(Self {
                q,
                k,
                v,
                o,
                conv_q: None,
                conv_k: None,
                w_phi: None,
                w_phi_k: None,
                gate_w1: None,
                gate_w2: None,
                gate_b: None,
            });
        }
        let (conv_q, conv_k) = if cfg.use_conv {
            let cq = b("conv_q", &p.conv_q)?;
            let ck = match &p.conv_k {
                Some(c) => b("conv_k", c)?,
                None => cq,
            };
            (Some(cq), Some(ck))
        } else {
            (None, None)
        };
        let w_phi = b("w_phi", &p.w_phi)?;
        let w_phi_k = match &p.w_phi_k {
            Some(w) => b("w_phi_k", w)?,
            None => w_phi,
        };
        Ok(Self {
            q,
            k,
            v,
            o,
            conv_q,
            conv_k,
            w_phi: Some(w_phi),
            w_phi_k: Some(w_phi_k),
            gate_w1: Some(b("gate_w1", &p.gate_w1)?),
            gate_w2: Some(b("gate_w2", &p.gate_w2)?),
            gate_b: Some(b("gate_b", &p.gate_b)?),
        })
    }
}

fn missing(name: &str) -> Error {
    Error::Config(format!("layer parameter {name} is not bound"))
}

/// `x` split into `n_heads` column blocks, each multiplied by the matching
/// row block of `w`, optionally offset by a bias block and activated.
fn per_head(
    tape: &mut Tape,
    x: Var,
    w: Var,
    bias: Option<Var>,
    n_heads: usize,
    act: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let din = tape.shape(x)[1] / n_heads;
    let dout = tape.shape(w)[1];
    let mut parts = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (xs, ws) = if n_heads == 1 {
            (x, w)
        } else {
            (
                tape.slice(x, 1, h * din, (h + 1) * din)?,
                tape.slice(w, 0, h * din, (h + 1) * din)?,
            )
        };
        let mut y = tape.matmul(xs, ws)?;
        if let Some(b) = bias {
            let bs = tape.slice(b, 0, h * dout, (h + 1) * dout)?;
            let bs = tape.reshape(bs, &[1, dout])?;
            y = tape.add(y, bs)?;
        }
        parts.push(act(tape, y)?);
    }
    if n_heads == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts, 1)
    }
}

/// The layer on a tape, over `x: [n_seq·seq_len, d_model]` holding stacked
/// sequences. Returns `[n_seq·seq_len, d_model]`.
pub fn lawcat_attention_op(
    tape: &mut Tape,
    cfg: &LawcatConfig,
    vars: &LawcatVars,
    x: Var,
    seq_len: usize,
    mode: ScanMode,
) -> Result<Var> {
    let h = cfg.n_heads;
    let mut q = vars.q.apply(tape, x)?;
    let mut k = vars.k.apply(tape, x)?;
    let v = vars.v.apply(tape, x)?;
    if cfg.softmax_bypass {
        q = rope_op(tape, q, seq_len, h, cfg.rope_theta, 0)?;
        k = rope_op(tape, k, seq_len, h, cfg.rope_theta, 0)?;
        let o = softmax_attention_op(tape, q, k, v, seq_len, h, cfg.scale(), None)?;
        return vars.o.apply(tape, o);
    }
    if cfg.use_rope {
        q = rope_op(tape, q, seq_len, h, cfg.rope_theta, 0)?;
        k = rope_op(tape, k, seq_len, h, cfg.rope_theta, 0)?;
    }
    let (qc, kc) = match (vars.conv_q, vars.conv_k) {
        (Some(cq), Some(ck)) => (
            causal_conv1d_op(tape, q, cq, seq_len)?,
            causal_conv1d_op(tape, k, ck, seq_len)?,
        ),
        _ => (q, k),
    };
    let kind = cfg.feature_kind;
    let act = |t: &mut Tape, y: Var| kind.activate_op(t, y);
    let w_phi = vars.w_phi.ok_or_else(|| missing("w_phi"))?;
    let w_phi_k = vars.w_phi_k.ok_or_else(|| missing("w_phi_k"))?;
    let qd = per_head(tape, qc, w_phi, None, h, act)?;
    let kd = per_head(tape, kc, w_phi_k, None, h, act)?;
    let w1 = vars.gate_w1.ok_or_else(|| missing("gate_w1"))?;
    let w2 = vars.gate_w2.ok_or_else(|| missing("gate_w2"))?;
    let xw1 = tape.matmul(x, w1)?;
    let g = per_head(tape, xw1, w2, vars.gate_b, h, |t, y| t.sigmoid(y))?;
    let o = match cfg.hybrid_window {
        Some(w) => hybrid_op(tape, [q, k, qd, kd, v, g], seq_len, h, w, cfg.scale(), cfg.eps)?,
        None => gla_op(tape, qd, kd, v, g, seq_len, h, mode, cfg.gla_options())?,
    };
    vars.o.apply(tape, o)
}

/// Forward pass of one sequence `x: [N, d_model]` without gradients.
pub fn lawcat_attention(x: &Tensor, p: &LawcatParams, cfg: &LawcatConfig, mode: ScanMode) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if d != cfg.d_model {
        return Err(Error::shape("lawcat_attention", x.shape(), &[n, cfg.d_model]));
    }
    if n == 0 {
        return Err(Error::Input("empty sequence".into()));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let vars = LawcatVars::bind(&mut tape, &mut binder, "", p, cfg)?;
    let xv = tape.constant(x.clone());
    let y = lawcat_attention_op(&mut tape, cfg, &vars, xv, n, mode)?;
    Ok(tape.value(y).clone())
}

/// Per-sequence streaming state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub gla: GlaState,
    pub conv_q: ConvRing,
    pub conv_k: ConvRing,
    pub hybrid: Option<Vec<HybridHead>>,
}

impl LayerState {
    pub fn new(cfg: &LawcatConfig) -> Self {
        let r = cfg.conv_width.saturating_sub(1);
        Self {
            gla: GlaState::zeros(cfg.n_heads, cfg.d_feat, cfg.d_head),
            conv_q: ConvRing::new(r),
            conv_k: ConvRing::new(r),
            hybrid: cfg.hybrid_window.map(|w| {
                (0..cfg.n_heads)
                    .map(|_| HybridHead::new(w, cfg.d_feat, cfg.d_head))
                    .collect()
            }),
        }
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.gla.t
    }

    /// Bytes held by the state; fixed by the configuration.
    pub fn bytes(&self, cfg: &LawcatConfig) -> usize {
        let conv = 2 * cfg.conv_width.saturating_sub(1) * cfg.inner() * std::mem::size_of::<f64>();
        let hybrid = self.hybrid.as_ref().map_or(0, |hs| hs.iter().map(HybridHead::bytes).sum());
        self.gla.bytes() + conv + hybrid
    }
}

fn head_blocks(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, n_heads: usize, kind: Option<FeatureKind>) -> Result<Tensor> {
    let din = x.shape()[1] / n_heads;
    let dout = w.shape()[1];
    let mut parts = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (xs, ws) = if n_heads == 1 {
            (x.clone(), w.clone())
        } else {
            (slice(x, 1, h * din, (h + 1) * din)?, slice(w, 0, h * din, (h + 1) * din)?)
        };
        let mut y = matmul(&xs, &ws)?;
        if let Some(b) = bias {
            let bs = slice(b, 0, h * dout, (h + 1) * dout)?.reshape([1, dout])?;
            y = add(&y, &bs)?;
        }
        parts.push(match kind {
            Some(k) => k.activate(&y)?,
            None => sigmoid(&y)?,
        });
    }
    if n_heads == 1 {
        Ok(parts.pop().expect("one head"))
    } else {
        concat(&parts.iter().collect::<Vec<_>>(), 1)
    }
}

/// Consumes one token `x_t: [d_model]` and returns the layer output for it.
pub fn stream_step(state: &mut LayerState, x_t: &[f64], p: &LawcatParams, cfg: &LawcatConfig) -> Result<Vec<f64>> {
    if cfg.softmax_bypass {
        return Err(Error::Config("streaming is not available with the softmax bypass".into()));
    }
    if state.gla.n_heads() != cfg.n_heads
        || state.gla.d_feat() != cfg.d_feat
        || state.gla.d_head() != cfg.d_head
        || state.hybrid.as_ref().map(Vec::len) != cfg.hybrid_window.map(|_| cfg.n_heads)
    {
        return Err(Error::Config(format!(
            "layer state has {} heads of {}x{}, config has {} heads of {}x{}",
            state.gla.n_heads(),
            state.gla.d_feat(),
            state.gla.d_head(),
            cfg.n_heads,
            cfg.d_feat,
            cfg.d_head
        )));
    }
    if x_t.len() != cfg.d_model {
        return Err(Error::shape("stream_step", &[x_t.len()], &[cfg.d_model]));
    }
    let h = cfg.n_heads;
    let t = state.position();
    let x = Tensor::new([1, cfg.d_model], x_t.to_vec())?;
    let mut q = matmul(&x, &p.wq)?;
    let mut k = matmul(&x, &p.wk)?;
    let v = matmul(&x, &p.wv)?;
    if cfg.use_rope {
        q = rope_apply_heads(&q, &[t as f64], cfg.rope_theta, h)?;
        k = rope_apply_heads(&k, &[t as f64], cfg.rope_theta, h)?;
    }
    let (qc, kc) = if cfg.use_conv {
        (
            causal_conv1d(&q, &p.conv_q, Some(&mut state.conv_q))?,
            causal_conv1d(&k, p.conv_k(), Some(&mut state.conv_k))?,
        )
    } else {
        (q.clone(), k.clone())
    };
    let kind = Some(cfg.feature_kind);
    let qd = head_blocks(&qc, &p.w_phi, None, h, kind)?;
    let kd = head_blocks(&kc, p.w_phi_k(), None, h, kind)?;
    let g = head_blocks(&matmul(&x, &p.gate_w1)?, &p.gate_w2, Some(&p.gate_b), h, None)?;
    let o = match &mut state.hybrid {
        Some(heads) => {
            let o = hybrid_step_heads(heads, q.data(), k.data(), qd.data(), kd.data(), v.data(), g.data(), cfg.scale(), cfg.eps);
            state.gla.t += 1;
            o
        }
        None => {
            let (f, dh) = (cfg.d_feat, cfg.d_head);
            let mut o = vec![0.0; cfg.inner()];
            for hh in 0..h {
                let fs = hh * f..(hh + 1) * f;
                let ds = hh * dh..(hh + 1) * dh;
                state.gla.step_head(
                    hh,
                    &qd.data()[fs.clone()],
                    &kd.data()[fs.clone()],
                    &v.data()[ds.clone()],
                    &g.data()[fs],
                    cfg.gla_options(),
                    &mut o[ds],
                )?;
            }
            state.gla.t += 1;
            o
        }
    };
    let y = matmul(&Tensor::new([1, cfg.inner()], o)?, &p.wo)?;
    Ok(y.into_data())
}
