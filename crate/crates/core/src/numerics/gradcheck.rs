//! Central finite differences as an independent check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Worst coordinate found by [`grad_check_report`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Max over coordinates of `|analytic − central_difference| / (|central_difference| + 1e-8)`
/// for the scalar function `f` at `x`. The difference uses the five-point
/// central stencil, whose error is `O(eps⁴)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_report(f, x, eps).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let y = f(&mut tape, v)?;
        let out = tape.value(y);
        if out.numel() != 1 {
            return Err(Error::shape("grad_check", out.shape(), &[1]));
        }
        Ok(out.item())
    };

    let base = eval(x)?;
    if eval(x)?.to_bits() != base.to_bits() {
        return Err(Error::Oracle("function is not deterministic".into()));
    }

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let y = f(&mut tape, v)?;
    tape.backward(y)?;
    let analytic = tape.grad_tensor(v);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut at = |delta: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + delta;
            eval(&probe)
        };
        let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
        probe.data_mut()[i] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (numeric.abs() + 1e-8);
        if err > report.max_relative_error || !err.is_finite() {
            report = GradCheckReport {
                max_relative_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::new([1], vec![3.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum_all(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear() {
        let x = Tensor::new([4], vec![0.3, -1.0, 2.5, 7.0]).unwrap();
        let err = grad_check(|t, x| t.sum_all(x), &x, 1e-6).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let x = Tensor::zeros([1]);
        assert!(grad_check(|t, x| t.sum_all(x), &x, 1e-2).is_err());
    }

    #[test]
    fn nondeterministic_function_is_oracle_error() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::zeros([1]);
        let r = grad_check(
            |t, x| {
                calls.set(calls.get() + 1.0);
                let c = t.constant(Tensor::scalar(calls.get()));
                let y = t.add(x, c)?;
                t.sum_all(y)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Oracle(_))));
    }
}
