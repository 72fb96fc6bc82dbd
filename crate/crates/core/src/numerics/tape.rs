//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Every op appends a node holding its value. Nodes whose inputs require a
//! gradient also keep the information needed to back-propagate. After
//! [`Tape::backward`] the gradients are read with [`Tape::grad`] and the tape
//! is dropped.

use super::tensor::{self as k, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused op with a hand-written backward pass.
///
/// `forward` values are computed by the caller and handed to
/// [`Tape::custom`]; anything the backward pass needs beyond the inputs and
/// the output is stored inside the implementing type.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` means the
    /// input receives no gradient from this op.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

enum Backward {
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Sigmoid(Var),
    Silu(Var),
    OnePlusElu(Var),
    SoftmaxLast(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Gradients are only accumulated for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`]; `None` when the
    /// value did not influence the loss or does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, backward: Option<Backward>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            backward: if requires_grad { backward } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], backward: Backward) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, rg, Some(backward))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Backward::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = k::transpose(self.value(a))?;
        Ok(self.record(out, &[a], Backward::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::add(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Backward::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::sub(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Backward::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::mul(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Backward::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::div(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Backward::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s).check_finite("scale")?;
        Ok(self.record(out, &[a], Backward::Scale(a, s)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = k::exp(self.value(a))?;
        Ok(self.record(out, &[a], Backward::Exp(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = k::sigmoid(self.value(a))?;
        Ok(self.record(out, &[a], Backward::Sigmoid(a)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = k::silu(self.value(a))?;
        Ok(self.record(out, &[a], Backward::Silu(a)))
    }

    /// `1 + ELU(x)`, strictly positive.
    pub fn one_plus_elu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(k::one_plus_elu_scalar)
            .check_finite("one_plus_elu")?;
        Ok(self.record(out, &[a], Backward::OnePlusElu(a)))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let out = k::softmax_last(self.value(a))?;
        Ok(self.record(out, &[a], Backward::SoftmaxLast(a)))
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = k::sum_axis(self.value(a), axis)?;
        Ok(self.record(out, &[a], Backward::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self
            .shape(a)
            .get(axis)
            .copied()
            .ok_or_else(|| Error::shape("mean_axis", self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of all entries as a shape-`[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let out = Tensor::scalar(s).check_finite("sum")?;
        Ok(self.record(out, &[a], Backward::SumAll(a)))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = k::concat(&values, axis)?;
        Ok(self.record(out, parts, Backward::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = k::slice(self.value(a), axis, start, end)?;
        Ok(self.record(out, &[a], Backward::Slice(a, axis, start)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.record(out, &[a], Backward::Reshape(a)))
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::Input(format!("row id {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new([ids.len(), d], data)?;
        Ok(self.record(out, &[table], Backward::GatherRows(table, ids.to_vec())))
    }

    /// Row-wise RMS normalisation `x / sqrt(mean(x²) + eps) ∘ w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (m, d) = xv.dims2()?;
        let wv = self.value(w);
        if wv.shape() != [d] {
            return Err(Error::shape("rms_norm", xv.shape(), wv.shape()));
        }
        let mut out = vec![0.0; m * d];
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for j in 0..d {
                out[i * d + j] = row[j] * r * wv.data()[j];
            }
        }
        let out = Tensor::new([m, d], out)?.check_finite("rms_norm")?;
        Ok(self.record(out, &[x, w], Backward::RmsNorm { x, w, inv_rms }))
    }

    /// Mean next-token cross-entropy over rows with a target; rows with
    /// `None` are masked out. Fails when every row is masked.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, v) = lv.dims2()?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Data("cross-entropy over an empty target set".into()));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = &mut probs[i * v..(i + 1) * v];
            k::softmax_row(row);
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Input(format!("target {t} out of range for vocab {v}")));
                }
                loss -= row[t].max(f64::MIN_POSITIVE).ln();
            }
        }
        let out = Tensor::scalar(loss / count as f64).check_finite("cross_entropy")?;
        Ok(self.record(
            out,
            &[logits],
            Backward::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Records the result of a fused op whose forward value was computed by
    /// the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        let output = output.check_finite(name)?;
        Ok(self.record(output, inputs, Backward::Custom(inputs.to_vec(), op)))
    }

    /// Back-propagates from a single-element `loss`. Gradients accumulate into
    /// every node that requires one; the recorded backward state is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            if let Some(bw) = self.nodes[idx].backward.take() {
                self.apply(idx, &bw, &g)?;
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), node.value.numel());
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    /// Sums a gradient of broadcast shape `out_shape` back onto `shape`.
    fn unbroadcast(g: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
        if shape == out_shape {
            return g.to_vec();
        }
        let map = k::broadcast_index_map(shape, out_shape);
        let mut r = vec![0.0; shape.iter().product()];
        for (gi, &i) in g.iter().zip(&map) {
            r[i] += gi;
        }
        r
    }

    fn apply(&mut self, idx: usize, bw: &Backward, g: &[f64]) -> Result<()> {
        let out_shape = self.nodes[idx].value.shape().to_vec();
        match bw {
            Backward::Matmul(a, b) => {
                let (m, kk) = self.value(*a).dims2()?;
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * kk];
                    k::matmul_nt_acc(g, self.value(*b).data(), &mut ga, m, n, kk);
                    self.accumulate(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; kk * n];
                    k::matmul_tn_acc(self.value(*a).data(), g, &mut gb, m, kk, n);
                    self.accumulate(*b, gb);
                }
            }
            Backward::Transpose(a) => {
                let gt = Tensor::new(out_shape, g.to_vec())?;
                let back = k::transpose(&gt)?;
                self.accumulate(*a, back.into_data());
            }
            Backward::Add(a, b) | Backward::Sub(a, b) => {
                let sign = if matches!(bw, Backward::Sub(..)) { -1.0 } else { 1.0 };
                let ga = Self::unbroadcast(g, self.shape(*a), &out_shape);
                let mut gb = Self::unbroadcast(g, self.shape(*b), &out_shape);
                if sign < 0.0 {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Backward::Mul(a, b) | Backward::Div(a, b) => {
                let is_div = matches!(bw, Backward::Div(..));
                let av = self.value(*a);
                let bv = self.value(*b);
                let ia = k::broadcast_index_map(av.shape(), &out_shape);
                let ib = k::broadcast_index_map(bv.shape(), &out_shape);
                let mut ga = vec![0.0; av.numel()];
                let mut gb = vec![0.0; bv.numel()];
                for (o, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                    let (x, y) = (av.data()[i], bv.data()[j]);
                    if is_div {
                        ga[i] += g[o] / y;
                        gb[j] -= g[o] * x / (y * y);
                    } else {
                        ga[i] += g[o] * y;
                        gb[j] += g[o] * x;
                    }
                }
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Backward::Scale(a, s) => {
                self.accumulate(*a, g.iter().map(|x| x * s).collect());
            }
            Backward::Exp(a) => {
                let y = self.nodes[idx].value.data();
                let ga = g.iter().zip(y).map(|(g, y)| g * y).collect();
                self.accumulate(*a, ga);
            }
            Backward::Sigmoid(a) => {
                let y = self.nodes[idx].value.data();
                let ga = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(*a, ga);
            }
            Backward::Silu(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = k::sigmoid_scalar(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(*a, ga);
            }
            Backward::OnePlusElu(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * x.exp() })
                    .collect();
                self.accumulate(*a, ga);
            }
            Backward::SoftmaxLast(a) => {
                let y = self.nodes[idx].value.data();
                let c = *out_shape.last().unwrap_or(&1);
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let s = k::dot(gr, yr);
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(*a, ga);
            }
            Backward::SumAxis(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, len, inner) = k::axis_split(&shape, *axis);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(*a, ga);
            }
            Backward::SumAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(*a, vec![g[0]; n]);
            }
            Backward::Concat(parts, axis) => {
                let (outer, total, inner) = k::axis_split(&out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    self.accumulate(p, gp);
                }
            }
            Backward::Slice(a, axis, start) => {
                let shape = self.shape(*a).to_vec();
                let (outer, len, inner) = k::axis_split(&shape, *axis);
                let width = out_shape[*axis] * inner;
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    ga[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                self.accumulate(*a, ga);
            }
            Backward::Reshape(a) => self.accumulate(*a, g.to_vec()),
            Backward::GatherRows(table, ids) => {
                let (rows, d) = self.value(*table).dims2()?;
                let mut gt = vec![0.0; rows * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
                self.accumulate(*table, gt);
            }
            Backward::RmsNorm { x, w, inv_rms } => {
                let xv = self.value(*x);
                let wv = self.value(*w).data();
                let (m, d) = xv.dims2()?;
                let mut gx = vec![0.0; m * d];
                let mut gw = vec![0.0; d];
                for i in 0..m {
                    let r = inv_rms[i];
                    let row = xv.row(i);
                    let gr = &g[i * d..(i + 1) * d];
                    let mut proj = 0.0;
                    for j in 0..d {
                        let n = row[j] * r;
                        gw[j] += gr[j] * n;
                        proj += gr[j] * wv[j] * n;
                    }
                    proj /= d as f64;
                    for j in 0..d {
                        gx[i * d + j] = r * (gr[j] * wv[j] - row[j] * r * proj);
                    }
                }
                self.accumulate(*x, gx);
                self.accumulate(*w, gw);
            }
            Backward::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = out_shape_of(self.value(*logits));
                let count = targets.iter().flatten().count() as f64;
                let mut gl = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &mut gl[i * v..(i + 1) * v];
                        row.copy_from_slice(&probs[i * v..(i + 1) * v]);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= g[0] / count);
                    }
                }
                self.accumulate(*logits, gl);
            }
            Backward::Custom(inputs, op) => {
                let grads = {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                    op.backward(&vals, &self.nodes[idx].value, g)?
                };
                for (&input, grad) in inputs.iter().zip(grads) {
                    if let Some(grad) = grad {
                        self.accumulate(input, grad);
                    }
                }
            }
        }
        Ok(())
    }
}

fn out_shape_of(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}
