//! Dense row-major f64 tensors and the forward kernels behind every tape op.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Dense n-dimensional array of f64, row-major.
///
/// Values are immutable once they are placed on a [`crate::Tape`]; gradient
/// participation is tracked by the tape node that owns the value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Self::new([rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for x in &mut t.data {
            let z: f64 = rng.sample(StandardNormal);
            *x = z * std;
        }
        t
    }

    /// Entries drawn uniformly from [lo, hi).
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for x in &mut t.data {
            *x = rng.gen_range(lo..hi);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape("dims2", &self.shape, &[0, 0])),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fails with a numeric error naming `op` when any entry is NaN or infinite.
    pub fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::non_finite(op))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new([m, n], out)?.check_finite("matmul")
}

/// `out += a · b` on raw row-major slices.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where `a` is `[k,m]` and `b` is `[k,n]`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is `[m,k]` and `b` is `[n,k]`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new([n, m], out)
}

/// Output shape of numpy-style broadcasting, aligned from the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index into an operand of
/// `shape` under broadcasting.
pub(crate) fn broadcast_index_map(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(total);
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data)?.check_finite(op);
    }
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
    let ia = broadcast_index_map(a.shape(), &out_shape);
    let ib = broadcast_index_map(b.shape(), &out_shape);
    let data = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(out_shape, data)?.check_finite(op)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("mul", a, b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("div", a, b, |x, y| x / y)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn one_plus_elu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        1.0 + x
    } else {
        x.exp()
    }
}

pub fn exp(a: &Tensor) -> Result<Tensor> {
    a.map(f64::exp).check_finite("exp")
}

pub fn sigmoid(a: &Tensor) -> Result<Tensor> {
    a.map(sigmoid_scalar).check_finite("sigmoid")
}

pub fn silu(a: &Tensor) -> Result<Tensor> {
    a.map(|x| x * sigmoid_scalar(x)).check_finite("silu")
}

/// In-place softmax of a single row, max-shifted.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Softmax over the last axis.
pub fn softmax_last(a: &Tensor) -> Result<Tensor> {
    let c = *a.shape().last().ok_or_else(|| Error::Input("softmax of rank-0 tensor".into()))?;
    let mut out = a.clone();
    if c > 0 {
        for row in out.data_mut().chunks_mut(c) {
            softmax_row(row);
        }
    }
    out.check_finite("softmax")
}

/// Splits a shape around `axis` into (outer, axis_len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sum over `axis`; the axis is kept with length 1.
pub fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::shape("sum_axis", a.shape(), &[axis]));
    }
    let (outer, len, inner) = axis_split(a.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &a.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out)?.check_finite("sum")
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
    if axis >= first.rank() {
        return Err(Error::shape("concat", first.shape(), &[axis]));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let mut s = p.shape().to_vec();
        if s.len() != first.rank() {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
        shape[axis] += s[axis];
        s[axis] = first.shape()[axis];
        if s != first.shape() {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::new(shape, data)
}

/// Slice `[start, end)` along `axis`.
pub fn slice(a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= a.rank() || start > end || end > a.shape()[axis] {
        return Err(Error::shape("slice", a.shape(), &[axis, start, end]));
    }
    let (outer, len, inner) = axis_split(a.shape(), axis);
    let width = (end - start) * inner;
    let mut data = Vec::with_capacity(outer * width);
    for o in 0..outer {
        let base = o * len * inner + start * inner;
        data.extend_from_slice(&a.data()[base..base + width]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = end - start;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform() {
        let s = softmax_last(&Tensor::new([3], vec![0.0; 3]).unwrap()).unwrap();
        for x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_zero() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
    }

    #[test]
    fn non_finite_is_error() {
        let a = Tensor::new([1], vec![1000.0]).unwrap();
        assert!(matches!(exp(&a), Err(Error::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn broadcast_trailing_singleton() {
        let a = Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new([2, 1], vec![10., 20.]).unwrap();
        let c = add(&a, &b).unwrap();
        assert_eq!(c.data(), &[11., 12., 13., 24., 25., 26.]);
        let r = Tensor::new([3], vec![1., 1., 1.]).unwrap();
        assert_eq!(mul(&a, &r).unwrap().data(), a.data());
        assert!(add(&a, &Tensor::zeros([2])).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = Tensor::new([2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new([2, 1], vec![5., 6.]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(slice(&c, 1, 0, 2).unwrap(), a);
        assert_eq!(slice(&c, 1, 2, 3).unwrap(), b);
    }

    #[test]
    fn sum_over_axis() {
        let a = Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(sum_axis(&a, 0).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(sum_axis(&a, 1).unwrap().data(), &[6., 15.]);
    }
}
