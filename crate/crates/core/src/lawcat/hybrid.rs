//! Sliding-window softmax combined with the gated linear branch.
//!
//! For query `t` and window `W`, keys `i > t−W` are scored with
//! `exp(scale · q_t·k_i)` and keys `i ≤ t−W` with `q̇_t · (J_{i,t} ∘ k̇_i)`.
//! Both kinds of score share one numerator and one denominator:
//!
//! ```text
//! o_t = (Σ_win a_i v_i + q̇_t U_t) / (Σ_win a_i + q̇_t · u_t)
//! U_t = diag(g_t) U_{t-1} + diag(P_t) k̇_{t−W}ᵀ v_{t−W},   P_t = g_{t−W+1} ∘ … ∘ g_t
//! u_t = g_t ∘ u_{t-1} + P_t ∘ k̇_{t−W}
//! ```
//!
//! The window scores are shifted by their maximum `m`, so the linear terms
//! are scaled by `e^{−m}`.

use std::collections::VecDeque;

use crate::attn_ref::Heads;
use crate::lawcat::gla::{gather_block, scatter_block};
use crate::numerics::tensor::dot;
use crate::numerics::{CustomOp, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    k: Vec<f64>,
    kd: Vec<f64>,
    v: Vec<f64>,
    g: Vec<f64>,
}

/// Streaming state of the hybrid branch for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridHead {
    window: usize,
    ring: VecDeque<Entry>,
    u_mat: Vec<f64>,
    u_vec: Vec<f64>,
    p: Vec<f64>,
}

impl HybridHead {
    pub fn new(window: usize, d_feat: usize, d_head: usize) -> Self {
        Self {
            window,
            ring: VecDeque::with_capacity(window + 1),
            u_mat: vec![0.0; d_feat * d_head],
            u_vec: vec![0.0; d_feat],
            p: vec![1.0; d_feat],
        }
    }

    pub fn bytes(&self) -> usize {
        let (f, d) = (self.u_vec.len(), self.u_mat.len() / self.u_vec.len().max(1));
        (self.window * (2 * d + 2 * f) + f * d + 2 * f) * std::mem::size_of::<f64>()
    }

    /// Advances by one token and writes `o_t`. Returns `(den, m)`.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        q: &[f64],
        k: &[f64],
        qd: &[f64],
        kd: &[f64],
        v: &[f64],
        g: &[f64],
        scale: f64,
        eps: f64,
        o: &mut [f64],
    ) -> (f64, f64) {
        let (f, d) = (qd.len(), v.len());
        self.ring.push_back(Entry {
            k: k.to_vec(),
            kd: kd.to_vec(),
            v: v.to_vec(),
            g: g.to_vec(),
        });
        if self.ring.len() > self.window {
            let old = self.ring.pop_front().expect("nonempty ring");
            self.p.iter_mut().for_each(|x| *x = 1.0);
            for e in &self.ring {
                self.p.iter_mut().zip(&e.g).for_each(|(p, g)| *p *= g);
            }
            for a in 0..f {
                let w = self.p[a] * old.kd[a];
                let row = &mut self.u_mat[a * d..(a + 1) * d];
                for (u, vb) in row.iter_mut().zip(&old.v) {
                    *u = g[a] * *u + w * vb;
                }
                self.u_vec[a] = g[a] * self.u_vec[a] + w;
            }
        }
        let logits: Vec<f64> = self.ring.iter().map(|e| scale * dot(q, &e.k)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        o.iter_mut().for_each(|x| *x = 0.0);
        let mut den = 0.0;
        for (e, l) in self.ring.iter().zip(&logits) {
            let a = (l - m).exp();
            den += a;
            for (ob, vb) in o.iter_mut().zip(&e.v) {
                *ob += a * vb;
            }
        }
        let c = (-m).exp();
        let mut lin = vec![0.0; d];
        for a in 0..f {
            let row = &self.u_mat[a * d..(a + 1) * d];
            for (l, u) in lin.iter_mut().zip(row) {
                *l += qd[a] * u;
            }
        }
        for (ob, l) in o.iter_mut().zip(&lin) {
            *ob += c * l;
        }
        den += c * dot(qd, &self.u_vec);
        let den_c = den.max(eps);
        o.iter_mut().for_each(|x| *x /= den_c);
        (den, m)
    }
}

/// Per-token hybrid step over all heads of one sequence, rows being
/// `[n_heads * d_head]` or `[n_heads * d_feat]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn hybrid_step_heads(
    heads: &mut [HybridHead],
    q: &[f64],
    k: &[f64],
    qd: &[f64],
    kd: &[f64],
    v: &[f64],
    g: &[f64],
    scale: f64,
    eps: f64,
) -> Vec<f64> {
    let nh = heads.len();
    let (dh, f) = (v.len() / nh, qd.len() / nh);
    let mut out = vec![0.0; v.len()];
    for (h, head) in heads.iter_mut().enumerate() {
        let (hs, fs) = (h * dh..(h + 1) * dh, h * f..(h + 1) * f);
        head.step(
            &q[hs.clone()],
            &k[hs.clone()],
            &qd[fs.clone()],
            &kd[fs.clone()],
            &v[hs.clone()],
            &g[fs],
            scale,
            eps,
            &mut out[hs],
        );
    }
    out
}

/// Inputs of the hybrid branch for stacked sequences.
pub struct HybridInputs<'a> {
    /// Raw queries and keys, `[rows, n_heads * d_head]`.
    pub q: &'a Tensor,
    pub k: &'a Tensor,
    /// Features, `[rows, n_heads * d_feat]`.
    pub qd: &'a Tensor,
    pub kd: &'a Tensor,
    pub v: &'a Tensor,
    /// Gates, `[rows, n_heads * d_feat]`.
    pub g: &'a Tensor,
}

fn geometry(x: &HybridInputs, seq_len: usize, n_heads: usize) -> Result<(Heads, Heads)> {
    let dgeo = Heads::of(x.q, seq_len, n_heads)?;
    let fgeo = Heads::of(x.qd, seq_len, n_heads)?;
    if x.k.shape() != x.q.shape() || x.v.shape() != x.q.shape() {
        return Err(Error::shape("hybrid", x.q.shape(), x.v.shape()));
    }
    if x.kd.shape() != x.qd.shape() || x.g.shape() != x.qd.shape() || fgeo.n_seq != dgeo.n_seq {
        return Err(Error::shape("hybrid", x.qd.shape(), x.g.shape()));
    }
    Ok((dgeo, fgeo))
}

/// Hybrid attention over stacked sequences of length `seq_len`.
pub fn hybrid_attention(
    x: &HybridInputs,
    seq_len: usize,
    n_heads: usize,
    window: usize,
    scale: f64,
    eps: f64,
) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::Config("hybrid window must be >= 1".into()));
    }
    let (dgeo, fgeo) = geometry(x, seq_len, n_heads)?;
    let mut out = vec![0.0; x.v.numel()];
    for s in 0..dgeo.n_seq {
        let mut heads: Vec<HybridHead> = (0..n_heads)
            .map(|_| HybridHead::new(window, fgeo.d_head, dgeo.d_head))
            .collect();
        for t in 0..seq_len {
            let r = s * seq_len + t;
            let o = hybrid_step_heads(
                &mut heads,
                x.q.row(r),
                x.k.row(r),
                x.qd.row(r),
                x.kd.row(r),
                x.v.row(r),
                x.g.row(r),
                scale,
                eps,
            );
            out[r * dgeo.width()..(r + 1) * dgeo.width()].copy_from_slice(&o);
        }
    }
    Tensor::new(x.v.shape().to_vec(), out)?.check_finite("hybrid_attention")
}

/// Direct quadratic evaluation of the joint score distribution for one
/// head: every score is formed explicitly and normalized per query.
pub fn hybrid_oracle(
    q: &Tensor,
    k: &Tensor,
    qd: &Tensor,
    kd: &Tensor,
    v: &Tensor,
    g: &Tensor,
    window: usize,
    scale: f64,
) -> Result<Tensor> {
    let (n, d) = v.dims2()?;
    let (_, f) = qd.dims2()?;
    if window == 0 {
        return Err(Error::Config("hybrid window must be >= 1".into()));
    }
    let mut out = Tensor::zeros([n, d]);
    for t in 0..n {
        let mut scores = vec![0.0; t + 1];
        for (i, sc) in scores.iter_mut().enumerate() {
            if i + window > t {
                *sc = (scale * dot(q.row(t), k.row(i))).exp();
            } else {
                for a in 0..f {
                    let j: f64 = (i + 1..=t).map(|z| g.get2(z, a)).product();
                    *sc += qd.get2(t, a) * j * kd.get2(i, a);
                }
            }
        }
        let total: f64 = scores.iter().sum();
        let row = out.row_mut(t);
        for (i, sc) in scores.iter().enumerate() {
            for b in 0..d {
                row[b] += sc / total * v.get2(i, b);
            }
        }
    }
    out.check_finite("hybrid_oracle")
}

struct HybridOp {
    dgeo: Heads,
    fgeo: Heads,
    window: usize,
    scale: f64,
    eps: f64,
}

struct BlockGrads {
    q: Vec<f64>,
    k: Vec<f64>,
    qd: Vec<f64>,
    kd: Vec<f64>,
    v: Vec<f64>,
    g: Vec<f64>,
}

impl HybridOp {
    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        q: &Tensor,
        k: &Tensor,
        qd: &Tensor,
        kd: &Tensor,
        v: &Tensor,
        g: &Tensor,
        go: &Tensor,
    ) -> BlockGrads {
        let (n, d, f, w) = (self.dgeo.seq_len, self.dgeo.d_head, self.fgeo.d_head, self.window);
        let mut head = HybridHead::new(w, f, d);
        let mut u_mats = vec![0.0; (n + 1) * f * d];
        let mut u_vecs = vec![0.0; (n + 1) * f];
        let mut ps = vec![0.0; n * f];
        let mut outs = vec![0.0; n * d];
        let mut dens = vec![0.0; n];
        let mut ms = vec![0.0; n];
        for t in 0..n {
            let (den, m) = head.step(
                q.row(t),
                k.row(t),
                qd.row(t),
                kd.row(t),
                v.row(t),
                g.row(t),
                self.scale,
                self.eps,
                &mut outs[t * d..(t + 1) * d],
            );
            dens[t] = den;
            ms[t] = m;
            u_mats[(t + 1) * f * d..(t + 2) * f * d].copy_from_slice(&head.u_mat);
            u_vecs[(t + 1) * f..(t + 2) * f].copy_from_slice(&head.u_vec);
            ps[t * f..(t + 1) * f].copy_from_slice(&head.p);
        }
        let mut gr = BlockGrads {
            q: vec![0.0; n * d],
            k: vec![0.0; n * d],
            qd: vec![0.0; n * f],
            kd: vec![0.0; n * f],
            v: vec![0.0; n * d],
            g: vec![0.0; n * f],
        };
        let mut lam = vec![0.0; f * d];
        let mut lz = vec![0.0; f];
        let mut dnum = vec![0.0; d];
        let mut dkey = vec![0.0; f];
        let mut prefix = vec![0.0; (w + 1) * f];
        for t in (0..n).rev() {
            let got = go.row(t);
            let o = &outs[t * d..(t + 1) * d];
            let den_c = dens[t].max(self.eps);
            for b in 0..d {
                dnum[b] = got[b] / den_c;
            }
            let dden = if dens[t] > self.eps {
                -dot(got, o) / den_c
            } else {
                0.0
            };
            let (qt, lo) = (q.row(t), (t + 1).saturating_sub(w));
            for i in lo..=t {
                let a = (self.scale * dot(qt, k.row(i)) - ms[t]).exp();
                let vi = v.row(i);
                for b in 0..d {
                    gr.v[i * d + b] += a * dnum[b];
                }
                let dl = a * (dot(&dnum, vi) + dden) * self.scale;
                let ki = k.row(i);
                for b in 0..d {
                    gr.q[t * d + b] += dl * ki[b];
                    gr.k[i * d + b] += dl * qt[b];
                }
            }
            let c = (-ms[t]).exp();
            let u_t = &u_mats[(t + 1) * f * d..(t + 2) * f * d];
            let uz_t = &u_vecs[(t + 1) * f..(t + 2) * f];
            let qdt = qd.row(t);
            for a in 0..f {
                gr.qd[t * f + a] += c * (dot(&u_t[a * d..(a + 1) * d], &dnum) + dden * uz_t[a]);
                for b in 0..d {
                    lam[a * d + b] += c * qdt[a] * dnum[b];
                }
                lz[a] += c * dden * qdt[a];
            }
            if t < w {
                continue;
            }
            let e = t - w;
            let (kde, ve, gt) = (kd.row(e), v.row(e), g.row(t));
            let p = &ps[t * f..(t + 1) * f];
            let u_prev = &u_mats[t * f * d..(t + 1) * f * d];
            let uz_prev = &u_vecs[t * f..(t + 1) * f];
            for a in 0..f {
                let row = &lam[a * d..(a + 1) * d];
                dkey[a] = dot(row, ve) + lz[a];
                gr.kd[e * f + a] += p[a] * dkey[a];
                let key = p[a] * kde[a];
                for b in 0..d {
                    gr.v[e * d + b] += row[b] * key;
                }
                gr.g[t * f + a] += dot(row, &u_prev[a * d..(a + 1) * d]) + lz[a] * uz_prev[a];
            }
            // dP_t = k̇_e ∘ dkey, spread over g_{e+1..=t} without division.
            prefix[..f].iter_mut().for_each(|x| *x = 1.0);
            for j in 0..w {
                let gj = g.row(e + 1 + j);
                for a in 0..f {
                    prefix[(j + 1) * f + a] = prefix[j * f + a] * gj[a];
                }
            }
            let mut suffix = vec![1.0; f];
            for j in (0..w).rev() {
                let z = e + 1 + j;
                for a in 0..f {
                    gr.g[z * f + a] += kde[a] * dkey[a] * prefix[j * f + a] * suffix[a];
                }
                let gz = g.row(z);
                suffix.iter_mut().zip(gz).for_each(|(s, g)| *s *= g);
            }
            for a in 0..f {
                for b in 0..d {
                    lam[a * d + b] *= gt[a];
                }
                lz[a] *= gt[a];
            }
        }
        gr
    }
}

impl CustomOp for HybridOp {
    fn name(&self) -> &'static str {
        "hybrid_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g_out: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (dgeo, fgeo) = (self.dgeo, self.fgeo);
        let go = Tensor::new(inputs[4].shape().to_vec(), g_out.to_vec())?;
        let mut grads: Vec<Vec<f64>> = inputs.iter().map(|x| vec![0.0; x.numel()]).collect();
        let geos = [dgeo, dgeo, fgeo, fgeo, dgeo, fgeo];
        for s in 0..dgeo.n_seq {
            for h in 0..dgeo.n_heads {
                let b: Vec<Tensor> = inputs
                    .iter()
                    .zip(&geos)
                    .map(|(x, geo)| gather_block(x, *geo, s, h))
                    .collect();
                let gob = gather_block(&go, dgeo, s, h);
                let gr = self.block_backward(&b[0], &b[1], &b[2], &b[3], &b[4], &b[5], &gob);
                let (n, d, f) = (dgeo.seq_len, dgeo.d_head, fgeo.d_head);
                let parts = [
                    (gr.q, d),
                    (gr.k, d),
                    (gr.qd, f),
                    (gr.kd, f),
                    (gr.v, d),
                    (gr.g, f),
                ];
                for (i, (data, width)) in parts.into_iter().enumerate() {
                    scatter_block(&mut grads[i], &Tensor::new([n, width], data)?, geos[i], s, h);
                }
            }
        }
        Ok(grads.into_iter().map(Some).collect())
    }
}

/// Hybrid attention on the tape. Input order: raw `q`, `k`, features `q̇`,
/// `k̇`, values `v`, gates `g`.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_op(
    tape: &mut Tape,
    inputs: [Var; 6],
    seq_len: usize,
    n_heads: usize,
    window: usize,
    scale: f64,
    eps: f64,
) -> Result<Var> {
    let [q, k, qd, kd, v, g] = inputs;
    let x = HybridInputs {
        q: tape.value(q),
        k: tape.value(k),
        qd: tape.value(qd),
        kd: tape.value(kd),
        v: tape.value(v),
        g: tape.value(g),
    };
    let (dgeo, fgeo) = geometry(&x, seq_len, n_heads)?;
    let out = hybrid_attention(&x, seq_len, n_heads, window, scale, eps)?;
    let op = HybridOp {
        dgeo,
        fgeo,
        window,
        scale,
        eps,
    };
    tape.custom(&inputs, out, Box::new(op))
}
