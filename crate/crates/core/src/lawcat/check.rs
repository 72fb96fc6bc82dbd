//! Randomized agreement sweep between the three GLA evaluation routes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::feature::FeatureKind;
use super::gla::{gla_parallel_oracle, gla_scan_chunked, gla_scan_recurrent, GlaOptions};
use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckReport {
    pub instances: usize,
    /// Largest deviation from the oracle, relative to the oracle's max
    /// absolute output.
    pub max_deviation: f64,
    pub worst_seed: u64,
}

pub fn relative_deviation(a: &Tensor, oracle: &Tensor) -> f64 {
    let scale = oracle.data().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.max_abs_diff(oracle) / scale
}

/// For each seed draws one instance of length `n` (feature and head dims
/// from {2, 4, 16}, feature kinds in rotation, gates in (0,1)) and compares
/// the recurrent scan and the chunked scan (chunks 1, 7, 16 and `n`)
/// against the quadratic oracle.
pub fn oracle_check(n: usize, seeds: u64) -> Result<OracleCheckReport> {
    if n == 0 || seeds == 0 {
        return Err(Error::Config("oracle check needs n >= 1 and seeds >= 1".into()));
    }
    let dims = [2, 4, 16];
    let mut report = OracleCheckReport {
        instances: 0,
        max_deviation: 0.0,
        worst_seed: 0,
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = dims[rng.gen_range(0..3)];
        let d = dims[rng.gen_range(0..3)];
        let kind = FeatureKind::ALL[(seed % 3) as usize];
        let q = kind.activate(&Tensor::randn([n, f], 1.0, &mut rng))?;
        let k = kind.activate(&Tensor::randn([n, f], 1.0, &mut rng))?;
        let v = Tensor::randn([n, d], 1.0, &mut rng);
        let g = Tensor::uniform([n, f], 1e-3, 1.0 - 1e-3, &mut rng);
        let opts = GlaOptions::default();
        let oracle = gla_parallel_oracle(&q, &k, &v, &g, opts)?;
        let (rec, _) = gla_scan_recurrent(&q, &k, &v, &g, None, opts)?;
        let mut worst = relative_deviation(&rec, &oracle);
        for c in [1, 7, 16, n] {
            let (ch, _) = gla_scan_chunked(&q, &k, &v, &g, c, None, opts)?;
            worst = worst.max(relative_deviation(&ch, &oracle));
        }
        report.instances += 1;
        if !(worst <= report.max_deviation) {
            report.max_deviation = worst;
            report.worst_seed = seed;
        }
    }
    Ok(report)
}
