//! Reference attention: causal softmax attention, rotary position embedding
//! and sliding-window attention.
//!
//! Activations use the multi-head row layout `[rows, n_heads * d_head]`, where
//! `rows` is a whole number of sequences of length `seq_len` stacked on top of
//! each other. Head `h` occupies columns `h*d_head .. (h+1)*d_head`.

use serde::{Deserialize, Serialize};

use crate::numerics::tensor::{dot, softmax_row};
use crate::numerics::{CustomOp, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub causal: bool,
    pub scale: f64,
    pub rope_theta: f64,
    pub window: Option<usize>,
}

impl AttnConfig {
    /// Causal, scale `1/sqrt(d_head)`, theta 10000, no window.
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
            causal: true,
            scale: 1.0 / (d_head as f64).sqrt(),
            rope_theta: 10_000.0,
            window: None,
        })
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = Some(window);
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.window == Some(0) {
            return Err(Error::Config("attention window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Geometry shared by the multi-head kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Heads {
    pub seq_len: usize,
    pub n_seq: usize,
    pub n_heads: usize,
    pub d_head: usize,
}

impl Heads {
    pub fn of(x: &Tensor, seq_len: usize, n_heads: usize) -> Result<Self> {
        let (rows, cols) = x.dims2()?;
        if seq_len == 0 || rows % seq_len != 0 || n_heads == 0 || cols % n_heads != 0 {
            return Err(Error::shape("heads", x.shape(), &[seq_len, n_heads]));
        }
        Ok(Self {
            seq_len,
            n_seq: rows / seq_len,
            n_heads,
            d_head: cols / n_heads,
        })
    }

    pub fn width(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Flat offset of `(seq, t, head)`.
    #[inline]
    pub fn at(&self, seq: usize, t: usize, head: usize) -> usize {
        (seq * self.seq_len + t) * self.width() + head * self.d_head
    }
}

fn window_start(t: usize, causal: bool, window: Option<usize>) -> usize {
    match (causal, window) {
        (true, Some(w)) => (t + 1).saturating_sub(w),
        _ => 0,
    }
}

/// Attention probabilities kept for the backward pass, one row per
/// `(seq, head, t)`, each starting at its window start.
struct SavedProbs {
    rows: Vec<Vec<f64>>,
}

fn softmax_attention_kernel(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    geo: Heads,
    scale: f64,
    causal: bool,
    window: Option<usize>,
    save: bool,
) -> Result<(Tensor, Option<SavedProbs>)> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape("softmax_attention", q.shape(), k.shape()));
    }
    let dh = geo.d_head;
    let n = geo.seq_len;
    let mut out = vec![0.0; q.numel()];
    let mut saved = save.then(|| SavedProbs { rows: Vec::new() });
    let mut buf = vec![0.0; n];
    for s in 0..geo.n_seq {
        for h in 0..geo.n_heads {
            for t in 0..n {
                let lo = window_start(t, causal, window);
                let hi = if causal { t + 1 } else { n };
                let qt = &q.data()[geo.at(s, t, h)..geo.at(s, t, h) + dh];
                let row = &mut buf[..hi - lo];
                for (j, i) in (lo..hi).enumerate() {
                    let ki = &k.data()[geo.at(s, i, h)..geo.at(s, i, h) + dh];
                    row[j] = scale * dot(qt, ki);
                }
                softmax_row(row);
                let o = &mut out[geo.at(s, t, h)..geo.at(s, t, h) + dh];
                for (j, i) in (lo..hi).enumerate() {
                    let vi = &v.data()[geo.at(s, i, h)..geo.at(s, i, h) + dh];
                    let p = row[j];
                    for (od, vd) in o.iter_mut().zip(vi) {
                        *od += p * vd;
                    }
                }
                if let Some(sv) = saved.as_mut() {
                    sv.rows.push(row.to_vec());
                }
            }
        }
    }
    let out = Tensor::new(q.shape().to_vec(), out)?.check_finite("softmax_attention")?;
    Ok((out, saved))
}

/// Single-sequence softmax attention over `[N, n_heads*d_head]` inputs.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttnConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, _) = q.dims2()?;
    if n == 0 {
        return Err(Error::Input("softmax attention over an empty sequence".into()));
    }
    let geo = Heads::of(q, n, cfg.n_heads)?;
    let (out, _) = softmax_attention_kernel(q, k, v, geo, cfg.scale, cfg.causal, cfg.window, false)?;
    Ok(out)
}

/// Causal softmax attention restricted to the last `cfg.window` positions.
pub fn sliding_window_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttnConfig,
) -> Result<Tensor> {
    match cfg.window {
        Some(w) if w >= 1 => {}
        _ => return Err(Error::Config("sliding window attention needs window >= 1".into())),
    }
    if !cfg.causal {
        return Err(Error::Config("sliding window attention is causal".into()));
    }
    softmax_attention(q, k, v, cfg)
}

/// Dense `[N, N]` attention weights of one head, zero above the diagonal and
/// outside the window.
pub fn attention_weights(q: &Tensor, k: &Tensor, cfg: &AttnConfig, head: usize) -> Result<Tensor> {
    cfg.validate()?;
    let (n, _) = q.dims2()?;
    let geo = Heads::of(q, n, cfg.n_heads)?;
    if head >= geo.n_heads {
        return Err(Error::Input(format!("head {head} out of range")));
    }
    let mut w = Tensor::zeros([n, n]);
    let dh = geo.d_head;
    for t in 0..n {
        let lo = window_start(t, cfg.causal, cfg.window);
        let hi = if cfg.causal { t + 1 } else { n };
        let qt = &q.data()[geo.at(0, t, head)..geo.at(0, t, head) + dh];
        let mut row: Vec<f64> = (lo..hi)
            .map(|i| cfg.scale * dot(qt, &k.data()[geo.at(0, i, head)..geo.at(0, i, head) + dh]))
            .collect();
        softmax_row(&mut row);
        w.row_mut(t)[lo..hi].copy_from_slice(&row);
    }
    Ok(w)
}

struct SoftmaxAttnOp {
    geo: Heads,
    scale: f64,
    causal: bool,
    window: Option<usize>,
    probs: SavedProbs,
}

impl CustomOp for SoftmaxAttnOp {
    fn name(&self) -> &'static str {
        "softmax_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let geo = self.geo;
        let dh = geo.d_head;
        let n = geo.seq_len;
        let mut gq = vec![0.0; q.numel()];
        let mut gk = vec![0.0; k.numel()];
        let mut gv = vec![0.0; v.numel()];
        let mut dp = vec![0.0; n];
        let mut row_idx = 0;
        for s in 0..geo.n_seq {
            for h in 0..geo.n_heads {
                for t in 0..n {
                    let lo = window_start(t, self.causal, self.window);
                    let hi = if self.causal { t + 1 } else { n };
                    let p = &self.probs.rows[row_idx];
                    row_idx += 1;
                    let go = &g[geo.at(s, t, h)..geo.at(s, t, h) + dh];
                    let dp = &mut dp[..hi - lo];
                    for (j, i) in (lo..hi).enumerate() {
                        let vi = &v.data()[geo.at(s, i, h)..geo.at(s, i, h) + dh];
                        dp[j] = dot(go, vi);
                        let gvi = &mut gv[geo.at(s, i, h)..geo.at(s, i, h) + dh];
                        for (a, b) in gvi.iter_mut().zip(go) {
                            *a += p[j] * b;
                        }
                    }
                    let mean = dot(p, dp);
                    let qt = &q.data()[geo.at(s, t, h)..geo.at(s, t, h) + dh];
                    for (j, i) in (lo..hi).enumerate() {
                        let ds = p[j] * (dp[j] - mean) * self.scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ki = &k.data()[geo.at(s, i, h)..geo.at(s, i, h) + dh];
                        let qo = geo.at(s, t, h);
                        for d in 0..dh {
                            gq[qo + d] += ds * ki[d];
                        }
                        let ko = geo.at(s, i, h);
                        for d in 0..dh {
                            gk[ko + d] += ds * qt[d];
                        }
                    }
                }
            }
        }
        Ok(vec![Some(gq), Some(gk), Some(gv)])
    }
}

/// Multi-head causal (optionally windowed) softmax attention on the tape.
/// Inputs are `[n_seq * seq_len, n_heads * d_head]`.
pub fn softmax_attention_op(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    seq_len: usize,
    n_heads: usize,
    scale: f64,
    window: Option<usize>,
) -> Result<Var> {
    if window == Some(0) {
        return Err(Error::Config("attention window must be >= 1".into()));
    }
    let geo = Heads::of(tape.value(q), seq_len, n_heads)?;
    let save = tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v);
    let (out, probs) = softmax_attention_kernel(
        tape.value(q),
        tape.value(k),
        tape.value(v),
        geo,
        scale,
        true,
        window,
        save,
    )?;
    let op = SoftmaxAttnOp {
        geo,
        scale,
        causal: true,
        window,
        probs: probs.unwrap_or(SavedProbs { rows: Vec::new() }),
    };
    tape.custom(&[q, k, v], out, Box::new(op))
}

fn rope_rotate(x: &mut [f64], geo: Heads, theta: f64, sign: f64, positions: Option<&[f64]>) {
    let dh = geo.d_head;
    let half = dh / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| theta.powf(-2.0 * j as f64 / dh as f64))
        .collect();
    for s in 0..geo.n_seq {
        for t in 0..geo.seq_len {
            let pos = positions.map_or(t as f64, |p| p[t]);
            for (j, f) in freqs.iter().enumerate() {
                let (sin, cos) = (sign * pos * f).sin_cos();
                for h in 0..geo.n_heads {
                    let o = geo.at(s, t, h) + 2 * j;
                    let (a, b) = (x[o], x[o + 1]);
                    x[o] = a * cos - b * sin;
                    x[o + 1] = a * sin + b * cos;
                }
            }
        }
    }
}

/// Rotary position embedding on a single `[N, d]` head: pair
/// `(x[2j], x[2j+1])` is rotated by `pos * theta^(-2j/d)`.
pub fn rope_apply(x: &Tensor, positions: &[f64], theta: f64) -> Result<Tensor> {
    rope_apply_heads(x, positions, theta, 1)
}

/// Rotary embedding applied independently to each head of a
/// `[N, n_heads * d_head]` tensor.
pub fn rope_apply_heads(x: &Tensor, positions: &[f64], theta: f64, n_heads: usize) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    if positions.len() != n {
        return Err(Error::shape("rope", x.shape(), &[positions.len()]));
    }
    if n == 0 {
        return Ok(x.clone());
    }
    let geo = Heads::of(x, n, n_heads)?;
    if geo.d_head % 2 != 0 {
        return Err(Error::Config(format!("rope needs an even head dim, got {}", geo.d_head)));
    }
    let mut out = x.clone();
    rope_rotate(out.data_mut(), geo, theta, 1.0, Some(positions));
    Ok(out)
}

struct RopeOp {
    geo: Heads,
    theta: f64,
    offset: usize,
}

impl CustomOp for RopeOp {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let mut gx = g.to_vec();
        let pos: Vec<f64> = (0..self.geo.seq_len).map(|t| (t + self.offset) as f64).collect();
        rope_rotate(&mut gx, self.geo, self.theta, -1.0, Some(&pos));
        Ok(vec![Some(gx)])
    }
}

/// Rotary embedding on the tape; positions restart at `offset` for every
/// stacked sequence.
pub fn rope_op(
    tape: &mut Tape,
    x: Var,
    seq_len: usize,
    n_heads: usize,
    theta: f64,
    offset: usize,
) -> Result<Var> {
    let geo = Heads::of(tape.value(x), seq_len, n_heads)?;
    if geo.d_head % 2 != 0 {
        return Err(Error::Config(format!("rope needs an even head dim, got {}", geo.d_head)));
    }
    let mut out = tape.value(x).clone();
    let pos: Vec<f64> = (0..seq_len).map(|t| (t + offset) as f64).collect();
    rope_rotate(out.data_mut(), geo, theta, 1.0, Some(&pos));
    tape.custom(&[x], out, Box::new(RopeOp { geo, theta, offset }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_token_returns_value() {
        let cfg = AttnConfig::new(2, 1).unwrap();
        let o = softmax_attention(&t(&[vec![0.3, 1.0]]), &t(&[vec![-2.0, 0.5]]), &t(&[vec![5.0, 5.0]]), &cfg)
            .unwrap();
        assert_eq!(o.data(), &[5.0, 5.0]);
    }

    #[test]
    fn equal_keys_average_values() {
        let cfg = AttnConfig::new(1, 1).unwrap();
        let q = t(&[vec![1.0], vec![1.0]]);
        let k = t(&[vec![0.7], vec![0.7]]);
        let v = t(&[vec![2.0], vec![4.0]]);
        let o = softmax_attention(&q, &k, &v, &cfg).unwrap();
        assert!((o.get2(1, 0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_two_tokens() {
        // Logits 0 and ln 2 give weights 1 and 2: o = (1·1 + 2·3) / 3.
        let cfg = AttnConfig::new(1, 1).unwrap().with_scale(1.0);
        let l2 = 2f64.ln();
        let v = t(&[vec![1.0], vec![3.0]]);
        let o = softmax_attention(&t(&[vec![0.0], vec![1.0]]), &t(&[vec![0.0], vec![l2]]), &v, &cfg).unwrap();
        assert!((o.get2(1, 0) - 7.0 / 3.0).abs() < 1e-14);

        // With Q = K = [[0],[ln 2]] the second logit is (ln 2)².
        let qk = t(&[vec![0.0], vec![l2]]);
        let o = softmax_attention(&qk, &qk, &v, &cfg).unwrap();
        let w = (l2 * l2).exp();
        assert!((o.get2(1, 0) - (1.0 + 3.0 * w) / (1.0 + w)).abs() < 1e-14);
    }

    #[test]
    fn empty_sequence_is_error() {
        let cfg = AttnConfig::new(2, 1).unwrap();
        let e = Tensor::zeros([0, 2]);
        assert!(softmax_attention(&e, &e, &e, &cfg).is_err());
    }

    #[test]
    fn window_of_one_is_identity_on_values() {
        let cfg = AttnConfig::new(2, 1).unwrap().with_window(1);
        let q = t(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0]]);
        let v = t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let o = sliding_window_attention(&q, &q, &v, &cfg).unwrap();
        assert_eq!(o, v);
    }

    #[test]
    fn window_two_equal_logits() {
        let cfg = AttnConfig::new(1, 1).unwrap().with_window(2);
        let q = t(&[vec![0.0], vec![0.0], vec![0.0]]);
        let v = t(&[vec![1.0], vec![2.0], vec![6.0]]);
        let o = sliding_window_attention(&q, &q, &v, &cfg).unwrap();
        assert!((o.get2(2, 0) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn window_zero_rejected() {
        let cfg = AttnConfig::new(1, 1).unwrap().with_window(0);
        let q = t(&[vec![0.0]]);
        assert!(matches!(sliding_window_attention(&q, &q, &q, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rope_position_zero_and_unit_rotation() {
        let x = t(&[vec![0.4, -1.2, 3.0, 0.5]]);
        assert_eq!(rope_apply(&x, &[0.0], 10_000.0).unwrap(), x);
        let p = 0.7;
        let y = rope_apply(&t(&[vec![1.0, 0.0]]), &[p], 123.0).unwrap();
        assert!((y.data()[0] - p.cos()).abs() < 1e-15);
        assert!((y.data()[1] - p.sin()).abs() < 1e-15);
    }

    #[test]
    fn rope_odd_dim_rejected() {
        let x = t(&[vec![1.0, 2.0, 3.0]]);
        assert!(matches!(rope_apply(&x, &[1.0], 10_000.0), Err(Error::Config(_))));
    }
}
