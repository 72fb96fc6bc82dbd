//! Placing named parameter tensors on a tape.

use std::collections::HashMap;

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

enum Source {
    Tensors,
    /// Parameters are slices of one flat vector, located by name. Used to run
    /// the finite-difference checker over a whole model.
    Flat {
        flat: Var,
        layout: HashMap<String, (usize, usize)>,
    },
}

/// Creates one tape variable per named parameter and remembers which ones
/// are trainable so their gradients can be collected after `backward`.
pub struct Binder {
    trainable: Box<dyn Fn(&str) -> bool>,
    source: Source,
    bound: Vec<(String, Var)>,
}

impl Binder {
    pub fn new(trainable: impl Fn(&str) -> bool + 'static) -> Self {
        Self {
            trainable: Box::new(trainable),
            source: Source::Tensors,
            bound: Vec::new(),
        }
    }

    /// Every parameter is a constant.
    pub fn frozen() -> Self {
        Self::new(|_| false)
    }

    pub fn all_trainable() -> Self {
        Self::new(|_| true)
    }

    /// Parameters are read from `flat`, which holds the tensors named in
    /// `layout` back to back in that order (as produced by [`flatten`]).
    pub fn from_flat<'a>(flat: Var, layout: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Self {
        let mut offset = 0;
        let layout = layout
            .into_iter()
            .map(|(name, t)| {
                let span = (offset, offset + t.numel());
                offset = span.1;
                (name.to_string(), span)
            })
            .collect();
        Self {
            trainable: Box::new(|_| true),
            source: Source::Flat { flat, layout },
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, value: &Tensor) -> Result<Var> {
        let var = match &mut self.source {
            Source::Tensors => tape.leaf(value.clone(), (self.trainable)(name)),
            Source::Flat { flat, layout } => {
                let &(lo, hi) = layout
                    .get(name)
                    .ok_or_else(|| Error::Config(format!("parameter {name} missing from flat layout")))?;
                if hi - lo != value.numel() || hi > tape.value(*flat).numel() {
                    return Err(Error::shape("binder", &[hi - lo], value.shape()));
                }
                let s = tape.slice(*flat, 0, lo, hi)?;
                tape.reshape(s, value.shape())?
            }
        };
        self.bound.push((name.to_string(), var));
        Ok(var)
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    /// Gradients of every trainable bound parameter, by name.
    pub fn grads(&self, tape: &Tape) -> Vec<(String, Tensor)> {
        self.bound
            .iter()
            .filter(|(_, v)| tape.requires_grad(*v))
            .map(|(n, v)| (n.clone(), tape.grad_tensor(*v)))
            .collect()
    }
}

/// Concatenation of the given tensors into one `[total]` vector.
pub fn flatten<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Tensor {
    let data: Vec<f64> = tensors.into_iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len();
    Tensor::new([n], data).expect("flat shape")
}

/// A projection `x·W`, optionally with a low-rank delta `s·(x·A)·B`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub lora: Option<(Var, Var, f64)>,
}

impl Linear {
    pub fn plain(w: Var) -> Self {
        Self { w, lora: None }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        match self.lora {
            None => Ok(y),
            Some((a, b, s)) => {
                let xa = tape.matmul(x, a)?;
                let xab = tape.matmul(xa, b)?;
                let delta = tape.scale(xab, s)?;
                tape.add(y, delta)
            }
        }
    }
}
