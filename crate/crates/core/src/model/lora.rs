//! Low-rank adapters on frozen projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{add, matmul, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [Self::Q, Self::K, Self::V, Self::O];

    pub fn name(self) -> &'static str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
        }
    }
}

fn default_rank() -> usize {
    8
}
fn default_alpha() -> f64 {
    16.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            alpha: default_alpha(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `y = x·W + (alpha/rank)·x·A·B` with `W` untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: LoraTarget,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    /// `A` small random, `B` zero.
    pub fn new(
        target: LoraTarget,
        d_in: usize,
        d_out: usize,
        cfg: LoraConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            target,
            a: Tensor::randn([d_in, cfg.rank], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros([cfg.rank, d_out]),
            rank: cfg.rank,
            alpha: cfg.alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The dense weight the adapter is equivalent to.
    pub fn merged(&self, base: &Tensor) -> Result<Tensor> {
        let delta = matmul(&self.a, &self.b)?.map(|x| x * self.scale());
        add(base, &delta)
    }
}

pub fn lora_apply(base: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    if adapter.rank == 0 {
        return Err(Error::Config("lora rank must be >= 1".into()));
    }
    let y = matmul(x, base)?;
    let s = adapter.scale();
    let delta = matmul(&matmul(x, &adapter.a)?, &adapter.b)?.map(|v| v * s);
    add(&y, &delta)
}
