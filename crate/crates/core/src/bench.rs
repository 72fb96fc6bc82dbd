//! Prefill latency of softmax, sliding-window and LAWCAT attention stacks
//! across sequence lengths, with a log-log scaling fit.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn_ref::{rope_apply_heads, softmax_attention, AttnConfig};
use crate::lawcat::{lawcat_attention, LawcatConfig, LawcatParams, LayerState, ScanMode};
use crate::numerics::{matmul, Tensor};
use crate::{Error, Result};

pub const CSV_HEADER: &str =
    "impl,seq_len,d_model,n_heads,n_layers,reps,wall_ns_p10,wall_ns_median,wall_ns_p90,peak_state_bytes";

const F64: usize = std::mem::size_of::<f64>();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Impl {
    Softmax,
    Swa,
    LawcatRecurrent,
    LawcatChunked,
}

impl Impl {
    pub const ALL: [Impl; 4] = [Self::Softmax, Self::Swa, Self::LawcatRecurrent, Self::LawcatChunked];

    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Swa => "swa",
            Self::LawcatRecurrent => "lawcat_recurrent",
            Self::LawcatChunked => "lawcat_chunked",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown bench impl {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub swa_window: usize,
    pub chunk: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Lengths whose estimated working set exceeds this are reported as
    /// failed rows instead of being run.
    pub memory_budget_bytes: usize,
    /// Lengths up to this are checked against the quadratic oracle first.
    pub check_up_to: usize,
    pub impls: Vec<Impl>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            swa_window: 64,
            chunk: 64,
            warmup: 1,
            seed: 0,
            memory_budget_bytes: 4 << 30,
            check_up_to: 512,
            impls: Impl::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "impl")]
    pub imp: Impl,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub reps: usize,
    pub wall_ns_p10: u64,
    pub wall_ns_median: u64,
    pub wall_ns_p90: u64,
    pub peak_state_bytes: usize,
    /// Reason the length was not run.
    pub failed: Option<String>,
}

struct SoftmaxLayer {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

struct Stack {
    softmax: Vec<SoftmaxLayer>,
    lawcat: Vec<LawcatParams>,
    lcfg: LawcatConfig,
    acfg: AttnConfig,
}

impl Stack {
    fn new(cfg: &BenchConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let lcfg = LawcatConfig::new(cfg.d_model, cfg.n_heads)?;
        let acfg = AttnConfig::new(cfg.d_model, cfg.n_heads)?;
        let mut softmax = Vec::new();
        let mut lawcat = Vec::new();
        for _ in 0..cfg.n_layers {
            let p = LawcatParams::init(&lcfg, &mut rng)?;
            softmax.push(SoftmaxLayer {
                wq: p.wq.clone(),
                wk: p.wk.clone(),
                wv: p.wv.clone(),
                wo: p.wo.clone(),
            });
            lawcat.push(p);
        }
        Ok(Self {
            softmax,
            lawcat,
            lcfg,
            acfg,
        })
    }

    fn run(&self, imp: Impl, x: &Tensor, cfg: &BenchConfig) -> Result<Tensor> {
        let mut h = x.clone();
        for l in 0..cfg.n_layers {
            h = match imp {
                Impl::Softmax | Impl::Swa => {
                    let p = &self.softmax[l];
                    let n = h.shape()[0];
                    let pos: Vec<f64> = (0..n).map(|i| i as f64).collect();
                    let theta = self.acfg.rope_theta;
                    let q = rope_apply_heads(&matmul(&h, &p.wq)?, &pos, theta, cfg.n_heads)?;
                    let k = rope_apply_heads(&matmul(&h, &p.wk)?, &pos, theta, cfg.n_heads)?;
                    let v = matmul(&h, &p.wv)?;
                    let acfg = match imp {
                        Impl::Swa => self.acfg.clone().with_window(cfg.swa_window),
                        _ => self.acfg.clone(),
                    };
                    matmul(&softmax_attention(&q, &k, &v, &acfg)?, &p.wo)?
                }
                Impl::LawcatRecurrent => lawcat_attention(&h, &self.lawcat[l], &self.lcfg, ScanMode::Recurrent)?,
                Impl::LawcatChunked => lawcat_attention(&h, &self.lawcat[l], &self.lcfg, ScanMode::Chunked(cfg.chunk))?,
            };
        }
        Ok(h)
    }

    fn state_bytes(&self, imp: Impl, n: usize, cfg: &BenchConfig) -> usize {
        let inner = cfg.d_model;
        let per_layer = match imp {
            Impl::Softmax => 2 * n * inner * F64,
            Impl::Swa => 2 * n.min(cfg.swa_window) * inner * F64,
            Impl::LawcatRecurrent | Impl::LawcatChunked => LayerState::new(&self.lcfg).bytes(&self.lcfg),
        };
        per_layer * cfg.n_layers
    }

    /// Rough upper bound on bytes allocated during one prefill.
    fn working_set(&self, imp: Impl, n: usize, cfg: &BenchConfig) -> usize {
        let f = self.lcfg.d_feat;
        let activations = match imp {
            Impl::Softmax | Impl::Swa => 8 * n * cfg.d_model + n,
            Impl::LawcatRecurrent => 24 * n * cfg.d_model + 6 * n * f * cfg.n_heads,
            Impl::LawcatChunked => 24 * n * cfg.d_model + 6 * n * f * cfg.n_heads + cfg.chunk * cfg.chunk * f,
        };
        activations * F64 + self.state_bytes(imp, n, cfg)
    }
}

fn percentile(sorted: &[u64], p: f64) -> u64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

/// Times every configured implementation at every length. Inputs are
/// shared across implementations at a given length, warm-up runs are
/// discarded and no gradients are recorded.
pub fn bench_prefill(cfg: &BenchConfig, lengths: &[usize], reps: usize) -> Result<Vec<BenchRow>> {
    if reps < 5 {
        return Err(Error::Config(format!("reps must be >= 5, got {reps}")));
    }
    if lengths.iter().any(|&n| n == 0) {
        return Err(Error::Config("bench lengths must be >= 1".into()));
    }
    if cfg.chunk == 0 || cfg.swa_window == 0 {
        return Err(Error::Config("chunk and swa_window must be >= 1".into()));
    }
    let stack = Stack::new(cfg)?;
    let mut rows = Vec::new();
    for &n in lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let x = Tensor::randn([n, cfg.d_model], 1.0, &mut rng);
        if n <= cfg.check_up_to {
            check_against_oracle(&stack, &x)?;
        }
        for &imp in &cfg.impls {
            let mut row = BenchRow {
                imp,
                seq_len: n,
                d_model: cfg.d_model,
                n_heads: cfg.n_heads,
                n_layers: cfg.n_layers,
                reps,
                wall_ns_p10: 0,
                wall_ns_median: 0,
                wall_ns_p90: 0,
                peak_state_bytes: stack.state_bytes(imp, n, cfg),
                failed: None,
            };
            let need = stack.working_set(imp, n, cfg);
            if need > cfg.memory_budget_bytes {
                row.failed = Some(format!(
                    "estimated working set {need} bytes exceeds the memory budget of {} bytes",
                    cfg.memory_budget_bytes
                ));
                rows.push(row);
                continue;
            }
            for _ in 0..cfg.warmup {
                std::hint::black_box(stack.run(imp, &x, cfg)?);
            }
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t0 = Instant::now();
                std::hint::black_box(stack.run(imp, std::hint::black_box(&x), cfg)?);
                times.push((t0.elapsed().as_nanos() as u64).max(1));
            }
            times.sort_unstable();
            row.wall_ns_p10 = percentile(&times, 0.1);
            row.wall_ns_median = percentile(&times, 0.5);
            row.wall_ns_p90 = percentile(&times, 0.9);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn check_against_oracle(stack: &Stack, x: &Tensor) -> Result<()> {
    for p in &stack.lawcat {
        let fast = lawcat_attention(x, p, &stack.lcfg, ScanMode::Recurrent)?;
        let slow = lawcat_attention(x, p, &stack.lcfg, ScanMode::Oracle)?;
        let scale = slow.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let dev = fast.max_abs_diff(&slow) / scale;
        if !(dev < 1e-8) {
            return Err(Error::Oracle(format!(
                "recurrent output deviates from the oracle by {dev:e} at length {}",
                x.shape()[0]
            )));
        }
    }
    Ok(())
}

/// CSV with the fixed header; failed rows leave the timing fields empty.
pub fn write_csv(rows: &[BenchRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        let t = |v: u64| if r.failed.is_some() { String::new() } else { v.to_string() };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.imp.name(),
            r.seq_len,
            r.d_model,
            r.n_heads,
            r.n_layers,
            r.reps,
            t(r.wall_ns_p10),
            t(r.wall_ns_median),
            t(r.wall_ns_p90),
            r.peak_state_bytes
        )?;
    }
    Ok(())
}

/// Long-format data for gnuplot: one block per implementation, separated by
/// two blank lines so each is addressable with `index`.
pub fn write_gnuplot(rows: &[BenchRow], w: &mut impl Write) -> Result<()> {
    let mut first = true;
    for imp in Impl::ALL {
        let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.imp == imp && r.failed.is_none()).collect();
        if mine.is_empty() {
            continue;
        }
        if !first {
            writeln!(w, "\n")?;
        }
        first = false;
        writeln!(w, "# {}", imp.name())?;
        writeln!(w, "# seq_len wall_ns_median wall_ns_p10 wall_ns_p90 peak_state_bytes")?;
        for r in mine {
            writeln!(
                w,
                "{} {} {} {} {}",
                r.seq_len, r.wall_ns_median, r.wall_ns_p10, r.wall_ns_p90, r.peak_state_bytes
            )?;
        }
    }
    Ok(())
}

/// Least-squares slope of `ln(median time)` against `ln(seq_len)` for the
/// rows of one implementation.
pub fn fit_scaling_exponent(rows: &[BenchRow]) -> Result<f64> {
    let ok: Vec<&BenchRow> = rows.iter().filter(|r| r.failed.is_none()).collect();
    if let Some(first) = ok.first() {
        if ok.iter().any(|r| r.imp != first.imp) {
            return Err(Error::Fit("rows mix implementations".into()));
        }
    }
    let mut lens: Vec<usize> = ok.iter().map(|r| r.seq_len).collect();
    lens.sort_unstable();
    lens.dedup();
    if lens.len() < 4 {
        return Err(Error::Fit(format!("need at least 4 lengths, got {}", lens.len())));
    }
    if lens[lens.len() - 1] < 8 * lens[0] {
        return Err(Error::Fit("lengths must span at least a factor of 8".into()));
    }
    if ok.iter().any(|r| r.wall_ns_median == 0) {
        return Err(Error::Fit("zero timing".into()));
    }
    let pts: Vec<(f64, f64)> = ok
        .iter()
        .map(|r| ((r.seq_len as f64).ln(), (r.wall_ns_median as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Smallest benchmarked length from which `fast` has a lower median than
/// `slow` at every longer length as well.
pub fn crossover_length(rows: &[BenchRow], fast: Impl, slow: Impl) -> Option<usize> {
    let median = |imp: Impl, n: usize| {
        rows.iter()
            .find(|r| r.imp == imp && r.seq_len == n && r.failed.is_none())
            .map(|r| r.wall_ns_median)
    };
    let mut lens: Vec<usize> = rows.iter().map(|r| r.seq_len).collect();
    lens.sort_unstable();
    lens.dedup();
    let mut cross = None;
    for &n in lens.iter().rev() {
        match (median(fast, n), median(slow, n)) {
            (Some(a), Some(b)) if a < b => cross = Some(n),
            (Some(_), None) => cross = Some(n),
            _ => break,
        }
    }
    cross
}
