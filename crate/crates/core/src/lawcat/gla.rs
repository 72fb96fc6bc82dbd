//! Normalized gated linear attention.
//!
//! For one head with feature size `F` and value size `D`:
//!
//! ```text
//! S_t = diag(g_t) S_{t-1} + k̇_tᵀ v_t          S: F×D, S_0 = 0
//! z_t = g_t ∘ z_{t-1} + k̇_t                   z: F,   z_0 = 0
//! o_t = (q̇_t S_t) / max(q̇_t · z_t, ε)
//! ```
//!
//! The gate `g_t ∈ (0,1)^F` is shared by all `D` value columns. Under that
//! broadcast, the column-mean of the matrix normalizer
//! `Σ_i J_{i,t} ∘ (k̇_iᵀ 1)` equals `z_t` exactly, where
//! `J_{i,t} = g_t ∘ … ∘ g_{i+1}` (and `J_{t,t} = 1`).
//!
//! Three evaluation routes are provided: the recurrent scan, the chunked
//! scan and a quadratic oracle that materializes every `J_{i,t}`.

use crate::attn_ref::Heads;
use crate::numerics::tensor::dot;
use crate::numerics::{CustomOp, Tape, Tensor, Var};
use crate::{Error, Result};

/// Denominator floor for the normalized output.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Largest sequence the quadratic oracle accepts.
pub const ORACLE_MAX_LEN: usize = 4096;

/// Recurrent state of every head of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GlaState {
    /// `[n_heads, d_feat, d_head]`
    pub s: Tensor,
    /// `[n_heads, d_feat]`
    pub z: Tensor,
    /// Tokens consumed.
    pub t: usize,
}

impl GlaState {
    pub fn zeros(n_heads: usize, d_feat: usize, d_head: usize) -> Self {
        Self {
            s: Tensor::zeros([n_heads, d_feat, d_head]),
            z: Tensor::zeros([n_heads, d_feat]),
            t: 0,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn d_feat(&self) -> usize {
        self.s.shape()[1]
    }

    pub fn d_head(&self) -> usize {
        self.s.shape()[2]
    }

    pub fn bytes(&self) -> usize {
        (self.s.numel() + self.z.numel()) * std::mem::size_of::<f64>()
    }

    /// One token for head `h`, writing `o`.
    pub(crate) fn step_head(
        &mut self,
        h: usize,
        q: &[f64],
        k: &[f64],
        v: &[f64],
        g: &[f64],
        opts: GlaOptions,
        o: &mut [f64],
    ) -> Result<()> {
        let t = self.t;
        let (s, z) = self.head_mut(h);
        let den = step_raw(s, z, q, k, v, g, o, opts);
        let finite = |x: &[f64]| x.iter().all(|v| v.is_finite());
        if !den.is_finite() || !finite(o) || !finite(z) || !finite(s) {
            return Err(Error::NonFinite {
                op: "gla_step",
                context: Some(format!("head {h}, t {t}")),
            });
        }
        Ok(())
    }

    fn head_mut(&mut self, h: usize) -> (&mut [f64], &mut [f64]) {
        let (f, d) = (self.d_feat(), self.d_head());
        let s = &mut self.s.data_mut()[h * f * d..(h + 1) * f * d];
        let z = &mut self.z.data_mut()[h * f..(h + 1) * f];
        (s, z)
    }
}

/// Options shared by every evaluation route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlaOptions {
    /// Divide by `q̇·z`; `false` gives the un-normalized GLA read-out `q̇ S`.
    pub normalize: bool,
    pub eps: f64,
}

impl Default for GlaOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            eps: DEFAULT_EPS,
        }
    }
}

/// One recurrence step on raw slices; writes `o` and returns the raw
/// denominator `q̇·z'`.
#[inline]
fn step_raw(
    s: &mut [f64],
    z: &mut [f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    o: &mut [f64],
    opts: GlaOptions,
) -> f64 {
    let d = v.len();
    let fresh = z.iter().all(|&x| x == 0.0) && s.iter().all(|&x| x == 0.0);
    for f in 0..k.len() {
        let row = &mut s[f * d..(f + 1) * d];
        let (gf, kf) = (g[f], k[f]);
        for (sj, vj) in row.iter_mut().zip(v) {
            *sj = gf * *sj + kf * vj;
        }
        z[f] = gf * z[f] + kf;
    }
    o.iter_mut().for_each(|x| *x = 0.0);
    for f in 0..q.len() {
        let qf = q[f];
        let row = &s[f * d..(f + 1) * d];
        for (oj, sj) in o.iter_mut().zip(row) {
            *oj += qf * sj;
        }
    }
    let den = dot(q, z);
    finish(o, v, den, fresh, opts);
    den
}

/// Divides the numerator by the clamped denominator. From the empty state
/// the numerator is `(q̇·k̇) v`, which is evaluated as such.
#[inline]
fn finish(o: &mut [f64], v: &[f64], den: f64, fresh: bool, opts: GlaOptions) {
    let den_c = den.max(opts.eps);
    match (fresh, opts.normalize) {
        (true, true) => o.iter_mut().zip(v).for_each(|(x, vj)| *x = vj * (den / den_c)),
        (true, false) => o.iter_mut().zip(v).for_each(|(x, vj)| *x = vj * den),
        (false, true) => o.iter_mut().for_each(|x| *x /= den_c),
        (false, false) => {}
    }
}

fn check_single(q: &Tensor, k: &Tensor, v: &Tensor, g: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, f) = q.dims2()?;
    if k.shape() != q.shape() {
        return Err(Error::shape("gla", q.shape(), k.shape()));
    }
    if g.shape() != q.shape() {
        return Err(Error::shape("gla", q.shape(), g.shape()));
    }
    let (nv, d) = v.dims2()?;
    if nv != n {
        return Err(Error::shape("gla", q.shape(), v.shape()));
    }
    Ok((n, f, d))
}

/// A single-head state for the standalone scans.
fn single_state(init: Option<&GlaState>, f: usize, d: usize) -> Result<GlaState> {
    match init {
        Some(s) if s.n_heads() == 1 && s.d_feat() == f && s.d_head() == d => Ok(s.clone()),
        Some(s) => Err(Error::shape("gla_state", s.s.shape(), &[1, f, d])),
        None => Ok(GlaState::zeros(1, f, d)),
    }
}

/// One token of one head: advances `state` (which must have a single head)
/// and returns `o_t`.
pub fn gla_step(
    state: &mut GlaState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    opts: GlaOptions,
) -> Result<Vec<f64>> {
    if state.n_heads() != 1 || q.len() != state.d_feat() || v.len() != state.d_head() {
        return Err(Error::shape("gla_step", state.s.shape(), &[q.len(), v.len()]));
    }
    if k.len() != q.len() || g.len() != q.len() {
        return Err(Error::shape("gla_step", &[q.len()], &[k.len(), g.len()]));
    }
    let mut o = vec![0.0; v.len()];
    state.step_head(0, q, k, v, g, opts, &mut o)?;
    state.t += 1;
    Ok(o)
}

/// Fold of [`gla_step`] over a single head's `[N, F]` / `[N, D]` inputs.
pub fn gla_scan_recurrent(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    init: Option<&GlaState>,
    opts: GlaOptions,
) -> Result<(Tensor, GlaState)> {
    let (n, f, d) = check_single(q, k, v, g)?;
    let mut state = single_state(init, f, d)?;
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        let o = gla_step(&mut state, q.row(t), k.row(t), v.row(t), g.row(t), opts)?;
        out[t * d..(t + 1) * d].copy_from_slice(&o);
    }
    Ok((Tensor::new([n, d], out)?, state))
}

/// Quadratic evaluation with full `[N, F, D]` matrix gates: every
/// `J_{i,t}` is materialized, the normalizer repeats `k̇_iᵀ` over the `D`
/// columns and takes the column mean before the product with `q̇_t`.
pub fn gla_parallel_oracle_matrix(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    gates: &Tensor,
    opts: GlaOptions,
) -> Result<Tensor> {
    let (n, f) = q.dims2()?;
    let (_, d) = v.dims2()?;
    if n > ORACLE_MAX_LEN {
        return Err(Error::Oracle(format!(
            "sequence length {n} exceeds the oracle cap {ORACLE_MAX_LEN}"
        )));
    }
    if k.shape() != q.shape() || v.shape()[0] != n || gates.shape() != [n, f, d] {
        return Err(Error::shape("gla_parallel_oracle", q.shape(), gates.shape()));
    }
    let gd = gates.data();
    let mut out = vec![0.0; n * d];
    let mut j_prod = vec![0.0; f * d];
    let mut num_mat = vec![0.0; f * d];
    let mut den_mat = vec![0.0; f * d];
    for t in 0..n {
        num_mat.iter_mut().for_each(|x| *x = 0.0);
        den_mat.iter_mut().for_each(|x| *x = 0.0);
        // J_{t,t} = 1, then J_{i,t} = J_{i+1,t} ∘ G_{i+1} walking i downward.
        j_prod.iter_mut().for_each(|x| *x = 1.0);
        for i in (0..=t).rev() {
            if i < t {
                let gi = &gd[(i + 1) * f * d..(i + 2) * f * d];
                j_prod.iter_mut().zip(gi).for_each(|(j, g)| *j *= g);
            }
            let (ki, vi) = (k.row(i), v.row(i));
            for a in 0..f {
                for b in 0..d {
                    let j = j_prod[a * d + b];
                    num_mat[a * d + b] += j * ki[a] * vi[b];
                    den_mat[a * d + b] += j * ki[a];
                }
            }
        }
        let qt = q.row(t);
        let o = &mut out[t * d..(t + 1) * d];
        let mut den = 0.0;
        for a in 0..f {
            let mean = den_mat[a * d..(a + 1) * d].iter().sum::<f64>() / d as f64;
            den += qt[a] * mean;
            for b in 0..d {
                o[b] += qt[a] * num_mat[a * d + b];
            }
        }
        finish(o, v.row(t), den, t == 0, opts);
    }
    Tensor::new([n, d], out)?.check_finite("gla_parallel_oracle")
}

/// Quadratic oracle for vector gates: the gates are broadcast along the value
/// dimension and handed to [`gla_parallel_oracle_matrix`].
pub fn gla_parallel_oracle(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    opts: GlaOptions,
) -> Result<Tensor> {
    let (n, f, d) = check_single(q, k, v, g)?;
    if n > ORACLE_MAX_LEN {
        return Err(Error::Oracle(format!(
            "sequence length {n} exceeds the oracle cap {ORACLE_MAX_LEN}"
        )));
    }
    let mut gates = Vec::with_capacity(n * f * d);
    for &x in g.data() {
        gates.extend(std::iter::repeat(x).take(d));
    }
    let gates = Tensor::new([n, f, d], gates)?;
    gla_parallel_oracle_matrix(q, k, v, &gates, opts)
}

/// Chunkwise evaluation: quadratic inside each chunk of `chunk` tokens, with
/// the recurrent state carried across chunk boundaries.
pub fn gla_scan_chunked(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    chunk: usize,
    init: Option<&GlaState>,
    opts: GlaOptions,
) -> Result<(Tensor, GlaState)> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be >= 1".into()));
    }
    let (n, f, d) = check_single(q, k, v, g)?;
    let mut state = single_state(init, f, d)?;
    let mut out = vec![0.0; n * d];
    let mut decay = vec![0.0; f];
    let mut pair = vec![0.0; f];
    let fresh = state.s.data().iter().chain(state.z.data()).all(|&x| x == 0.0);
    let mut c0 = 0;
    while c0 < n {
        let c1 = (c0 + chunk).min(n);
        let (s0, z0) = state.head_mut(0);
        decay.iter_mut().for_each(|x| *x = 1.0);
        for j in c0..c1 {
            let gj = g.row(j);
            decay.iter_mut().zip(gj).for_each(|(p, g)| *p *= g);
            let qj = q.row(j);
            let o = &mut out[j * d..(j + 1) * d];
            // Carried state decayed to position j.
            let mut den = 0.0;
            for a in 0..f {
                let w = qj[a] * decay[a];
                den += w * z0[a];
                for b in 0..d {
                    o[b] += w * s0[a * d + b];
                }
            }
            // Intra-chunk contributions, D_{i,j} built walking i downward.
            pair.iter_mut().for_each(|x| *x = 1.0);
            for i in (c0..=j).rev() {
                if i < j {
                    let gi = g.row(i + 1);
                    pair.iter_mut().zip(gi).for_each(|(p, g)| *p *= g);
                }
                let ki = k.row(i);
                let mut w = 0.0;
                for a in 0..f {
                    w += qj[a] * ki[a] * pair[a];
                }
                den += w;
                for (ob, vb) in o.iter_mut().zip(v.row(i)) {
                    *ob += w * vb;
                }
            }
            finish(o, v.row(j), den, fresh && j == 0, opts);
        }
        // State at the chunk end.
        for a in 0..f {
            for b in 0..d {
                s0[a * d + b] *= decay[a];
            }
            z0[a] *= decay[a];
        }
        pair.iter_mut().for_each(|x| *x = 1.0);
        for i in (c0..c1).rev() {
            if i + 1 < c1 {
                let gi = g.row(i + 1);
                pair.iter_mut().zip(gi).for_each(|(p, g)| *p *= g);
            }
            let (ki, vi) = (k.row(i), v.row(i));
            for a in 0..f {
                let w = ki[a] * pair[a];
                z0[a] += w;
                for b in 0..d {
                    s0[a * d + b] += w * vi[b];
                }
            }
        }
        state.t += c1 - c0;
        c0 = c1;
    }
    let out = Tensor::new([n, d], out)?.check_finite("gla_scan_chunked")?;
    Ok((out, state))
}

/// How the multi-head layer evaluates the GLA part.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Recurrent,
    Chunked(usize),
    Oracle,
}

/// Extracts one `(seq, head)` block of a stacked multi-head tensor.
pub(crate) fn gather_block(x: &Tensor, geo: Heads, s: usize, h: usize) -> Tensor {
    let w = geo.d_head;
    let mut data = Vec::with_capacity(geo.seq_len * w);
    for t in 0..geo.seq_len {
        let o = geo.at(s, t, h);
        data.extend_from_slice(&x.data()[o..o + w]);
    }
    Tensor::new([geo.seq_len, w], data).expect("block shape")
}

pub(crate) fn scatter_block(out: &mut [f64], block: &Tensor, geo: Heads, s: usize, h: usize) {
    let w = geo.d_head;
    for t in 0..geo.seq_len {
        let o = geo.at(s, t, h);
        out[o..o + w].copy_from_slice(block.row(t));
    }
}

/// Multi-head GLA over stacked sequences. `q`, `k`, `g` are
/// `[rows, n_heads * d_feat]`, `v` is `[rows, n_heads * d_head]`.
pub fn gla_multihead(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    seq_len: usize,
    n_heads: usize,
    mode: ScanMode,
    opts: GlaOptions,
) -> Result<Tensor> {
    let fgeo = Heads::of(q, seq_len, n_heads)?;
    let vgeo = Heads::of(v, seq_len, n_heads)?;
    if k.shape() != q.shape() || g.shape() != q.shape() || vgeo.n_seq != fgeo.n_seq {
        return Err(Error::shape("gla", q.shape(), v.shape()));
    }
    let mut out = vec![0.0; v.numel()];
    for s in 0..fgeo.n_seq {
        for h in 0..n_heads {
            let (qb, kb, gb) = (
                gather_block(q, fgeo, s, h),
                gather_block(k, fgeo, s, h),
                gather_block(g, fgeo, s, h),
            );
            let vb = gather_block(v, vgeo, s, h);
            let ob = match mode {
                ScanMode::Recurrent => gla_scan_recurrent(&qb, &kb, &vb, &gb, None, opts)
                    .map_err(|e| with_head(e, h))?
                    .0,
                ScanMode::Chunked(c) => gla_scan_chunked(&qb, &kb, &vb, &gb, c, None, opts)?.0,
                ScanMode::Oracle => gla_parallel_oracle(&qb, &kb, &vb, &gb, opts)?,
            };
            scatter_block(&mut out, &ob, vgeo, s, h);
        }
    }
    Tensor::new(v.shape().to_vec(), out)?.check_finite("gla")
}

fn with_head(e: Error, h: usize) -> Error {
    match e {
        Error::NonFinite { op, context } => Error::NonFinite {
            op,
            context: Some(format!("head {h}, {}", context.unwrap_or_default().replace("head 0, ", ""))),
        },
        e => e,
    }
}

struct GlaOp {
    fgeo: Heads,
    vgeo: Heads,
    opts: GlaOptions,
}

impl GlaOp {
    /// Gradients for one `(seq, head)` block. States are recomputed forward
    /// and the adjoint recurrence is run backward:
    ///
    /// ```text
    /// Λ_t = q̇_t dnum_tᵀ + diag(g_{t+1}) Λ_{t+1}      (∂L/∂S_t)
    /// λ_t = dden_t q̇_t  + g_{t+1} ∘ λ_{t+1}           (∂L/∂z_t)
    /// dk̇_t = Λ_t v_t + λ_t,  dv_t = Λ_tᵀ k̇_t
    /// dg_t = rowsum(Λ_t ∘ S_{t-1}) + λ_t ∘ z_{t-1}
    /// ```
    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        q: &[f64],
        k: &[f64],
        v: &[f64],
        g: &[f64],
        go: &[f64],
        n: usize,
        f: usize,
        d: usize,
        gq: &mut [f64],
        gk: &mut [f64],
        gv: &mut [f64],
        gg: &mut [f64],
    ) {
        // S_t for t = 0..=n and z_t likewise; index 0 is the zero state.
        let mut states = vec![0.0; (n + 1) * f * d];
        let mut zs = vec![0.0; (n + 1) * f];
        let mut o = vec![0.0; d];
        let mut dens = vec![0.0; n];
        for t in 0..n {
            let (prev, next) = states.split_at_mut((t + 1) * f * d);
            next[..f * d].copy_from_slice(&prev[t * f * d..]);
            let (zp, zn) = zs.split_at_mut((t + 1) * f);
            zn[..f].copy_from_slice(&zp[t * f..]);
            dens[t] = step_raw(
                &mut next[..f * d],
                &mut zn[..f],
                &q[t * f..(t + 1) * f],
                &k[t * f..(t + 1) * f],
                &v[t * d..(t + 1) * d],
                &g[t * f..(t + 1) * f],
                &mut o,
                self.opts,
            );
        }
        let mut lam = vec![0.0; f * d];
        let mut lz = vec![0.0; f];
        let mut dnum = vec![0.0; d];
        for t in (0..n).rev() {
            let s_t = &states[(t + 1) * f * d..(t + 2) * f * d];
            let z_t = &zs[(t + 1) * f..(t + 2) * f];
            let qt = &q[t * f..(t + 1) * f];
            let got = &go[t * d..(t + 1) * d];
            let dden;
            if self.opts.normalize {
                let den = dens[t];
                let den_c = den.max(self.opts.eps);
                // o = num / den_c, so dO·o = dO·num / den_c.
                let mut num_dot = 0.0;
                for b in 0..d {
                    let mut num = 0.0;
                    for a in 0..f {
                        num += qt[a] * s_t[a * d + b];
                    }
                    num_dot += got[b] * num;
                    dnum[b] = got[b] / den_c;
                }
                dden = if den > self.opts.eps {
                    -num_dot / (den_c * den_c)
                } else {
                    0.0
                };
            } else {
                dnum.copy_from_slice(got);
                dden = 0.0;
            }
            // dq̇_t = S_t dnum + dden z_t
            let gqt = &mut gq[t * f..(t + 1) * f];
            for a in 0..f {
                gqt[a] += dot(&s_t[a * d..(a + 1) * d], &dnum) + dden * z_t[a];
            }
            for a in 0..f {
                for b in 0..d {
                    lam[a * d + b] += qt[a] * dnum[b];
                }
                lz[a] += dden * qt[a];
            }
            let (kt, vt, gt) = (&k[t * f..(t + 1) * f], &v[t * d..(t + 1) * d], &g[t * f..(t + 1) * f]);
            let s_prev = &states[t * f * d..(t + 1) * f * d];
            let z_prev = &zs[t * f..(t + 1) * f];
            let gvt = &mut gv[t * d..(t + 1) * d];
            for a in 0..f {
                let row = &lam[a * d..(a + 1) * d];
                gk[t * f + a] += dot(row, vt) + lz[a];
                for b in 0..d {
                    gvt[b] += row[b] * kt[a];
                }
                gg[t * f + a] += dot(row, &s_prev[a * d..(a + 1) * d]) + lz[a] * z_prev[a];
            }
            for a in 0..f {
                for b in 0..d {
                    lam[a * d + b] *= gt[a];
                }
                lz[a] *= gt[a];
            }
        }
    }
}

impl CustomOp for GlaOp {
    fn name(&self) -> &'static str {
        "gla"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g_out: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (q, k, v, g) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (fgeo, vgeo) = (self.fgeo, self.vgeo);
        let (n, f, d) = (fgeo.seq_len, fgeo.d_head, vgeo.d_head);
        let mut gq = vec![0.0; q.numel()];
        let mut gk = vec![0.0; k.numel()];
        let mut gv = vec![0.0; v.numel()];
        let mut gg = vec![0.0; g.numel()];
        let go = Tensor::new(v.shape().to_vec(), g_out.to_vec())?;
        for s in 0..fgeo.n_seq {
            for h in 0..fgeo.n_heads {
                let qb = gather_block(q, fgeo, s, h);
                let kb = gather_block(k, fgeo, s, h);
                let gb = gather_block(g, fgeo, s, h);
                let vb = gather_block(v, vgeo, s, h);
                let gob = gather_block(&go, vgeo, s, h);
                let mut bq = vec![0.0; n * f];
                let mut bk = vec![0.0; n * f];
                let mut bv = vec![0.0; n * d];
                let mut bg = vec![0.0; n * f];
                self.block_backward(
                    qb.data(),
                    kb.data(),
                    vb.data(),
                    gb.data(),
                    gob.data(),
                    n,
                    f,
                    d,
                    &mut bq,
                    &mut bk,
                    &mut bv,
                    &mut bg,
                );
                scatter_block(&mut gq, &Tensor::new([n, f], bq)?, fgeo, s, h);
                scatter_block(&mut gk, &Tensor::new([n, f], bk)?, fgeo, s, h);
                scatter_block(&mut gg, &Tensor::new([n, f], bg)?, fgeo, s, h);
                scatter_block(&mut gv, &Tensor::new([n, d], bv)?, vgeo, s, h);
            }
        }
        Ok(vec![Some(gq), Some(gk), Some(gv), Some(gg)])
    }
}

/// Multi-head GLA on the tape. The forward value comes from `mode`; the
/// backward pass is the adjoint of the recurrence, which is the same
/// function for every mode.
#[allow(clippy::too_many_arguments)]
pub fn gla_op(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    g: Var,
    seq_len: usize,
    n_heads: usize,
    mode: ScanMode,
    opts: GlaOptions,
) -> Result<Var> {
    let out = gla_multihead(
        tape.value(q),
        tape.value(k),
        tape.value(v),
        tape.value(g),
        seq_len,
        n_heads,
        mode,
        opts,
    )?;
    let fgeo = Heads::of(tape.value(q), seq_len, n_heads)?;
    let vgeo = Heads::of(tape.value(v), seq_len, n_heads)?;
    tape.custom(&[q, k, v, g], out, Box::new(GlaOp { fgeo, vgeo, opts }))
}
