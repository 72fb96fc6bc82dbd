//! Causal depthwise Conv1D over time.
//!
//! Channel `c` of the output at position `t` is `Σ_δ kernel[c, δ] · x[t−δ, c]`
//! for `δ = 0..=r`: column 0 of the kernel is the current-position tap.
//! Positions before the sequence start are zero, or come from a [`ConvRing`]
//! when streaming. There is no bias and no nonlinearity.

use crate::attn_ref::Heads;
use crate::numerics::{CustomOp, Tape, Tensor, Var};
use crate::{Error, Result};

/// The last `r` pre-convolution rows of one stream, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvRing {
    rows: Vec<Vec<f64>>,
    capacity: usize,
}

impl ConvRing {
    pub fn new(r: usize) -> Self {
        Self {
            rows: Vec::with_capacity(r),
            capacity: r,
        }
    }

    pub fn filled(&self) -> usize {
        self.rows.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Row `δ` steps back from the newest entry (`δ = 1` is the newest).
    fn back(&self, delta: usize) -> Option<&[f64]> {
        self.rows.len().checked_sub(delta).map(|i| self.rows[i].as_slice())
    }

    fn push(&mut self, row: &[f64]) {
        if self.capacity == 0 {
            return;
        }
        if self.rows.len() == self.capacity {
            self.rows.remove(0);
        }
        self.rows.push(row.to_vec());
    }

    pub fn bytes(&self) -> usize {
        self.capacity * self.rows.first().map_or(0, Vec::len) * std::mem::size_of::<f64>()
    }
}

fn check_kernel(x: &Tensor, kernel: &Tensor) -> Result<(usize, usize)> {
    let (_, d) = x.dims2()?;
    let (kd, width) = kernel.dims2()?;
    if width == 0 {
        return Err(Error::Config("conv kernel width must be >= 1".into()));
    }
    if kd != d {
        return Err(Error::shape("causal_conv1d", x.shape(), kernel.shape()));
    }
    Ok((d, width))
}

/// Causal depthwise convolution of one `[N, d]` sequence with a `[d, r+1]`
/// kernel. With a cache, earlier positions are read from it and it is
/// advanced past `x`.
pub fn causal_conv1d(x: &Tensor, kernel: &Tensor, cache: Option<&mut ConvRing>) -> Result<Tensor> {
    let (d, width) = check_kernel(x, kernel)?;
    let (n, _) = x.dims2()?;
    let mut out = vec![0.0; n * d];
    let history = cache.as_deref();
    for t in 0..n {
        let o = &mut out[t * d..(t + 1) * d];
        for delta in 0..width {
            let src = if delta <= t {
                Some(x.row(t - delta))
            } else {
                history.and_then(|h| h.back(delta - t))
            };
            if let Some(src) = src {
                for c in 0..d {
                    o[c] += kernel.data()[c * width + delta] * src[c];
                }
            }
        }
    }
    if let Some(cache) = cache {
        for t in 0..n {
            cache.push(x.row(t));
        }
    }
    Tensor::new([n, d], out)?.check_finite("causal_conv1d")
}

fn conv_stacked(x: &Tensor, kernel: &Tensor, seq_len: usize) -> Result<Tensor> {
    let (d, width) = check_kernel(x, kernel)?;
    let geo = Heads::of(x, seq_len, 1)?;
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    let kd = kernel.data();
    for s in 0..geo.n_seq {
        for t in 0..seq_len {
            let o = (s * seq_len + t) * d;
            for delta in 0..width.min(t + 1) {
                let src = (s * seq_len + t - delta) * d;
                for c in 0..d {
                    out[o + c] += kd[c * width + delta] * xd[src + c];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.check_finite("causal_conv1d")
}

struct ConvOp {
    seq_len: usize,
}

impl CustomOp for ConvOp {
    fn name(&self) -> &'static str {
        "causal_conv1d"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let (rows, d) = x.dims2()?;
        let width = kernel.shape()[1];
        let n = self.seq_len;
        let mut gx = vec![0.0; rows * d];
        let mut gk = vec![0.0; d * width];
        let xd = x.data();
        let kd = kernel.data();
        for s in 0..rows / n {
            for t in 0..n {
                let o = (s * n + t) * d;
                for delta in 0..width.min(t + 1) {
                    let src = (s * n + t - delta) * d;
                    for c in 0..d {
                        gx[src + c] += kd[c * width + delta] * g[o + c];
                        gk[c * width + delta] += xd[src + c] * g[o + c];
                    }
                }
            }
        }
        Ok(vec![Some(gx), Some(gk)])
    }
}

/// Causal depthwise convolution on the tape over stacked sequences of
/// length `seq_len`, zero-padded at every sequence start.
pub fn causal_conv1d_op(tape: &mut Tape, x: Var, kernel: Var, seq_len: usize) -> Result<Var> {
    let out = conv_stacked(tape.value(x), tape.value(kernel), seq_len)?;
    tape.custom(&[x, kernel], out, Box::new(ConvOp { seq_len }))
}

/// `[d, width]` kernel with a unit current-position tap.
pub fn identity_kernel(d: usize, width: usize) -> Tensor {
    let mut k = Tensor::zeros([d, width]);
    for c in 0..d {
        k.data_mut()[c * width] = 1.0;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_tap_is_identity() {
        let x = Tensor::new([3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = causal_conv1d(&x, &identity_kernel(2, 4), None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn two_tap_average_hand_values() {
        let x = Tensor::new([3, 1], vec![1., 2., 3.]).unwrap();
        let k = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
        let y = causal_conv1d(&x, &k, None).unwrap();
        assert_eq!(y.data(), &[0.5, 1.5, 2.5]);
    }

    #[test]
    fn constant_input_after_warmup() {
        let x = Tensor::full([8, 3], 2.5);
        let k = Tensor::new([3, 4], [0.1, 0.2, 0.3, 0.4].repeat(3)).unwrap();
        let y = causal_conv1d(&x, &k, None).unwrap();
        for t in 3..8 {
            for c in 0..3 {
                assert!((y.get2(t, c) - 2.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_width_is_config_error() {
        let x = Tensor::zeros([2, 1]);
        let k = Tensor::zeros([1, 0]);
        assert!(matches!(causal_conv1d(&x, &k, None), Err(Error::Config(_))));
    }

    #[test]
    fn cached_chunks_match_single_pass() {
        let x = Tensor::new([7, 2], (0..14).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let k = Tensor::new([2, 4], vec![0.5, -0.2, 0.1, 0.3, 1.0, 0.4, -0.7, 0.2]).unwrap();
        let full = causal_conv1d(&x, &k, None).unwrap();
        let mut ring = ConvRing::new(3);
        let a = causal_conv1d(&crate::numerics::slice(&x, 0, 0, 2).unwrap(), &k, Some(&mut ring)).unwrap();
        let b = causal_conv1d(&crate::numerics::slice(&x, 0, 2, 7).unwrap(), &k, Some(&mut ring)).unwrap();
        assert_eq!(ring.filled(), 3);
        let joined = crate::numerics::concat(&[&a, &b], 0).unwrap();
        assert!(joined.max_abs_diff(&full) < 1e-15);
    }
}
