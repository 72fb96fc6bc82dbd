//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.
//!
//! `LAWCAT_ACCEPT_ONLY=1,4,9` restricts the run to the listed criteria.
//! `LAWCAT_ACCEPT_ALL_SEEDS=1` runs every ablation arm on all three seeds
//! instead of only the default and no-norm arms.

use std::time::Instant;

use lawcat::bench::{bench_prefill, crossover_length, fit_scaling_exponent, BenchConfig, BenchRow, Impl};
use lawcat::distill::{
    evaluate_lengths, run_student, train_teacher, Arm, RecipeConfig, RecipeReport, RunLog, SweepReport,
};
use lawcat::lawcat::*;
use lawcat::model::{student_grad_check, Model, ModelConfig};
use lawcat::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-8;
const REDUCTION_TOL: f64 = 1e-10;
const STREAM_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    relative_deviation(a, b)
}

fn positive_kind(seed: u64) -> FeatureKind {
    if seed % 2 == 0 {
        FeatureKind::SoftmaxFeatdim
    } else {
        FeatureKind::OnePlusElu
    }
}

struct Gla {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    g: Tensor,
}

fn gla_instance(n: usize, f: usize, d: usize, kind: FeatureKind, rng: &mut impl Rng) -> Gla {
    Gla {
        q: kind.activate(&Tensor::randn([n, f], 1.0, rng)).unwrap(),
        k: kind.activate(&Tensor::randn([n, f], 1.0, rng)).unwrap(),
        v: Tensor::randn([n, d], 1.0, rng),
        g: Tensor::uniform([n, f], 1e-3, 1.0 - 1e-3, rng),
    }
}

fn c1_oracle() -> Outcome {
    let t0 = Instant::now();
    let dims = [2, 4, 16];
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=128);
        let f = dims[rng.gen_range(0..3)];
        let d = dims[rng.gen_range(0..3)];
        let x = gla_instance(n, f, d, FeatureKind::ALL[(seed % 3) as usize], &mut rng);
        let o = GlaOptions::default();
        let oracle = gla_parallel_oracle(&x.q, &x.k, &x.v, &x.g, o).unwrap();
        let (rec, _) = gla_scan_recurrent(&x.q, &x.k, &x.v, &x.g, None, o).unwrap();
        worst = worst.max(rel_err(&rec, &oracle));
        for c in [1, 7, 16, n] {
            let (ch, _) = gla_scan_chunked(&x.q, &x.k, &x.v, &x.g, c, None, o).unwrap();
            worst = worst.max(rel_err(&ch, &oracle));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome::new(
        worst < ORACLE_TOL && secs < 60.0,
        format!("200 instances, max rel err {worst:.2e} (tol {ORACLE_TOL:e}), {secs:.1}s (limit 60s)"),
    )
}

fn c2_normalization() -> Outcome {
    let o = GlaOptions::default();
    let mut first_ok = 0;
    let mut hull_ok = 0;
    let mut reduce_worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = FeatureKind::ALL[(seed % 3) as usize];
        // The identity holds for a positive first-token score; the identity
        // feature kind is redrawn until it has one.
        let x = loop {
            let x = gla_instance(6, 4, 5, kind, &mut rng);
            let score: f64 = x.q.row(0).iter().zip(x.k.row(0)).map(|(a, b)| a * b).sum();
            if score > o.eps {
                break x;
            }
        };
        let (out, _) = gla_scan_recurrent(&x.q, &x.k, &x.v, &x.g, None, o).unwrap();
        if out.row(0) == x.v.row(0) {
            first_ok += 1;
        }

        let n = rng.gen_range(1..40);
        let x = gla_instance(n, 4, 3, positive_kind(seed), &mut rng);
        let (out, _) = gla_scan_recurrent(&x.q, &x.k, &x.v, &x.g, None, o).unwrap();
        let inside = (0..n).all(|t| {
            (0..3).all(|b| {
                let (lo, hi) = (0..=t)
                    .map(|i| x.v.get2(i, b))
                    .fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
                let y = out.get2(t, b);
                y >= lo - 1e-12 && y <= hi + 1e-12
            })
        });
        hull_ok += inside as usize;

        let n = rng.gen_range(1..40);
        let mut x = gla_instance(n, 3, 2, positive_kind(seed), &mut rng);
        x.g = Tensor::full([n, 3], 1.0);
        let (out, _) = gla_scan_recurrent(&x.q, &x.k, &x.v, &x.g, None, o).unwrap();
        for t in 0..n {
            let w: Vec<f64> = (0..=t).map(|i| (0..3).map(|a| x.q.get2(t, a) * x.k.get2(i, a)).sum()).collect();
            let den: f64 = w.iter().sum();
            for b in 0..2 {
                let num: f64 = (0..=t).map(|i| w[i] * x.v.get2(i, b)).sum();
                let expect = num / den;
                reduce_worst = reduce_worst.max((out.get2(t, b) - expect).abs() / expect.abs().max(1.0));
            }
        }
    }
    Outcome::new(
        first_ok == 100 && hull_ok == 100 && reduce_worst < REDUCTION_TOL,
        format!(
            "o1=v1 exact {first_ok}/100, convex hull {hull_ok}/100, unit-gate reduction err {reduce_worst:.2e} (tol {REDUCTION_TOL:e})"
        ),
    )
}

fn layer_setup(seed: u64, hybrid: Option<usize>) -> (LawcatConfig, LawcatParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = LawcatConfig::new(8, 2).unwrap();
    cfg.hybrid_window = hybrid;
    let mut p = LawcatParams::init(&cfg, &mut rng).unwrap();
    p.conv_q = Tensor::uniform(p.conv_q.shape().to_vec(), -0.5, 1.0, &mut rng);
    if let Some(c) = &mut p.conv_k {
        *c = Tensor::uniform(c.shape().to_vec(), -0.5, 1.0, &mut rng);
    }
    p.w_phi = Tensor::randn(p.w_phi.shape().to_vec(), 0.7, &mut rng);
    p.gate_w1 = Tensor::randn(p.gate_w1.shape().to_vec(), 0.3, &mut rng);
    p.gate_w2 = Tensor::randn(p.gate_w2.shape().to_vec(), 0.3, &mut rng);
    (cfg, p, rng)
}

fn stream(cfg: &LawcatConfig, p: &LawcatParams, x: &Tensor, state: &mut LayerState, from: usize, to: usize) -> Vec<f64> {
    (from..to).flat_map(|t| stream_step(state, x.row(t), p, cfg).unwrap()).collect()
}

fn c3_causality() -> Outcome {
    let n = 16;
    let mut violations = Vec::new();
    let mut checks = 0;
    for seed in 0..20u64 {
        for hybrid in [None, Some(4)] {
            let (cfg, p, mut rng) = layer_setup(seed, hybrid);
            let x = Tensor::randn([n, 8], 1.0, &mut rng);
            let j = rng.gen_range(1..n);
            let mut x2 = x.clone();
            for v in x2.row_mut(j) {
                *v += rng.gen_range(1.0..3.0);
            }
            let mut paths: Vec<(String, Tensor, Tensor)> = Vec::new();
            for mode in [ScanMode::Recurrent, ScanMode::Chunked(5), ScanMode::Oracle] {
                let a = lawcat_attention(&x, &p, &cfg, mode).unwrap();
                let b = lawcat_attention(&x2, &p, &cfg, mode).unwrap();
                paths.push((format!("{mode:?}"), a, b));
            }
            let sa = stream(&cfg, &p, &x, &mut LayerState::new(&cfg), 0, n);
            let sb = stream(&cfg, &p, &x2, &mut LayerState::new(&cfg), 0, n);
            paths.push(("stream".into(), Tensor::new([n, 8], sa).unwrap(), Tensor::new([n, 8], sb).unwrap()));
            for (name, a, b) in &paths {
                checks += 1;
                if (0..j).any(|t| a.row(t) != b.row(t)) {
                    violations.push(format!("{name} hybrid={hybrid:?} seed {seed}"));
                }
            }
        }
        // Model-level forward of a student with and without the SWA arm.
        for hybrid in [None, Some(4)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let teacher = Model::init_teacher(ModelConfig::teacher(20, 8, 2, 2, 16, 64), &mut rng).unwrap();
            let mut lc = LawcatConfig::new(8, 2).unwrap();
            lc.hybrid_window = hybrid;
            let student = Model::student_from_teacher(&teacher, lc, &mut rng).unwrap();
            let toks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..20)).collect();
            let j = rng.gen_range(1..n);
            let mut toks2 = toks.clone();
            toks2[j] = (toks2[j] + 1) % 20;
            for m in [&teacher, &student] {
                let a = m.forward(&toks).unwrap().logits;
                let b = m.forward(&toks2).unwrap().logits;
                checks += 1;
                if (0..j).any(|t| a.row(t) != b.row(t)) {
                    violations.push(format!("model hybrid={hybrid:?} seed {seed}"));
                }
            }
        }
        // Conv locality.
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let width = rng.gen_range(1..6);
        let x = Tensor::randn([n, 3], 1.0, &mut rng);
        let k = Tensor::randn([3, width], 1.0, &mut rng);
        let base = causal_conv1d(&x, &k, None).unwrap();
        let j = rng.gen_range(0..n);
        let mut x2 = x.clone();
        x2.row_mut(j)[1] += 5.0;
        let pert = causal_conv1d(&x2, &k, None).unwrap();
        checks += 1;
        if (0..n).any(|t| (t < j || t >= j + width) && base.row(t) != pert.row(t)) {
            violations.push(format!("conv seed {seed}"));
        }
    }
    Outcome::new(
        violations.is_empty(),
        format!("{checks} perturbation checks, {} exact-equality violations {:?}", violations.len(), violations),
    )
}

fn c4_streaming() -> Outcome {
    let mut worst = 0.0f64;
    let mut restore_exact = true;
    for seed in 0..5u64 {
        for hybrid in [None, Some(4)] {
            for n in [1usize, 2, 17, 128] {
                let (cfg, p, mut rng) = layer_setup(100 + seed, hybrid);
                let x = Tensor::randn([n, 8], 1.0, &mut rng);
                let batch = lawcat_attention(&x, &p, &cfg, ScanMode::Recurrent).unwrap();
                let mut st = LayerState::new(&cfg);
                let mid = n / 2;
                let mut out = stream(&cfg, &p, &x, &mut st, 0, mid);
                let saved = st.clone();
                let tail = stream(&cfg, &p, &x, &mut st, mid, n);
                // Scribble over the live state, then resume from the snapshot.
                let noise: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                stream_step(&mut st, &noise, &p, &cfg).unwrap();
                let mut restored = saved.clone();
                let tail2 = stream(&cfg, &p, &x, &mut restored, mid, n);
                restore_exact &= tail == tail2;
                out.extend(tail);
                let streamed = Tensor::new([n, 8], out).unwrap();
                worst = worst.max(batch.max_abs_diff(&streamed));
            }
        }
    }
    Outcome::new(
        worst < STREAM_TOL && restore_exact,
        format!("N in {{1,2,17,128}}, max abs diff {worst:.2e} (tol {STREAM_TOL:e}), save/restore exact {restore_exact}"),
    )
}

fn c5_gradients() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let r = student_grad_check(seed, 2, 16, 12).unwrap();
        worst = worst.max(r.max_relative_error);
    }
    Outcome::new(worst < GRAD_TOL, format!("10 seeds, max rel err {worst:.2e} (tol {GRAD_TOL:e})"))
}

fn accuracy_at(r: &RecipeReport, len: usize) -> f64 {
    r.accuracy.iter().find(|(l, _)| *l == len).map(|(_, a)| *a).unwrap_or(f64::NAN)
}

struct Recipe {
    cfg: RecipeConfig,
    teacher: Model,
    teacher_acc: f64,
    default_runs: Vec<RecipeReport>,
    secs: f64,
}

fn recipe_runs() -> Recipe {
    let t0 = Instant::now();
    let cfg = RecipeConfig::default();
    let (teacher, _) = train_teacher(&cfg, &mut RunLog::null()).unwrap();
    let teacher_acc = evaluate_lengths(&teacher, &cfg.task).unwrap()[0].1;
    let default_runs = SEEDS
        .iter()
        .map(|&s| run_student(&cfg, &teacher, Arm::Default, s, &mut RunLog::null()).unwrap().1)
        .collect();
    Recipe {
        cfg,
        teacher,
        teacher_acc,
        default_runs,
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn c6_recipe(r: &Recipe) -> Outcome {
    let sweep = SweepReport::from_runs("default".into(), r.default_runs.clone()).unwrap();
    let best = sweep.best_run();
    let drops: Vec<f64> = r.default_runs.iter().map(|x| x.distill.drop()).collect();
    let (a128, a256) = (accuracy_at(best, 128), accuracy_at(best, 256));
    let pass = r.teacher_acc >= 0.95 && best.distill.drop() >= 0.9 && a128 >= 0.9 && a256 >= 0.5;
    Outcome::new(
        pass,
        format!(
            "teacher@128 {:.2} (>=0.95); best seed {}: distill drop {:.3} (>=0.90), student@128 {a128:.2} (>=0.90), @256 {a256:.2} (>=0.50); drops per seed {:?}; {:.0}s (target 1800s)",
            r.teacher_acc,
            best.seed,
            best.distill.drop(),
            drops.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            r.secs
        ),
    )
}

fn c7_ablations(r: &Recipe) -> Outcome {
    let all_seeds = std::env::var("LAWCAT_ACCEPT_ALL_SEEDS").is_ok_and(|v| v == "1");
    let arms = [
        Arm::NoNorm,
        Arm::NoConv,
        Arm::RopeOn,
        Arm::SwaOn,
        Arm::ShareConv,
        Arm::GateRank(4),
        Arm::GateRank(8),
        Arm::GateRank(16),
        Arm::GateRank(32),
    ];
    let mut grid = vec![format!("{:<12} {:>6} {:>6}", "arm", "@128", "@256")];
    let mean_256 = |runs: &[RecipeReport]| runs.iter().map(|x| accuracy_at(x, 256)).sum::<f64>() / runs.len() as f64;
    let default_mean = mean_256(&r.default_runs);
    grid.push(format!("{:<12} {:>6.2} {:>6.2}", "default", mean_of(&r.default_runs, 128), default_mean));
    let mut completed = 0;
    let mut no_norm_mean = f64::NAN;
    for arm in arms {
        let seeds: &[u64] = if all_seeds || arm == Arm::NoNorm { &SEEDS } else { &SEEDS[..1] };
        let runs: Vec<RecipeReport> = seeds
            .iter()
            .filter_map(|&s| run_student(&r.cfg, &r.teacher, arm, s, &mut RunLog::null()).ok().map(|x| x.1))
            .collect();
        if runs.len() == seeds.len() && runs.iter().all(|x| x.accuracy.len() == r.cfg.task.eval_lengths.len()) {
            completed += 1;
        }
        if arm == Arm::NoNorm {
            no_norm_mean = mean_256(&runs);
        }
        grid.push(format!("{:<12} {:>6.2} {:>6.2}", arm.name(), mean_of(&runs, 128), mean_of(&runs, 256)));
    }
    for line in &grid {
        println!("    {line}");
    }
    Outcome::new(
        completed == arms.len() && no_norm_mean < default_mean,
        format!(
            "{completed}/{} arms completed; mean@256 over 3 seeds: no-norm {no_norm_mean:.3} vs default {default_mean:.3} (need strictly lower)",
            arms.len()
        ),
    )
}

fn mean_of(runs: &[RecipeReport], len: usize) -> f64 {
    runs.iter().map(|x| accuracy_at(x, len)).sum::<f64>() / runs.len().max(1) as f64
}

fn c8_scaling() -> Outcome {
    let t0 = Instant::now();
    let cfg = BenchConfig::default();
    let lengths = [1024, 2048, 4096, 8192, 16384, 32768];
    let rows = match bench_prefill(&cfg, &lengths, 5) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("bench failed: {e}")),
    };
    let of = |imp: Impl| -> Vec<BenchRow> { rows.iter().filter(|r| r.imp == imp && r.failed.is_none()).cloned().collect() };
    let lin = fit_scaling_exponent(&of(Impl::LawcatRecurrent));
    let quad = fit_scaling_exponent(&of(Impl::Softmax));
    let cross = crossover_length(&rows, Impl::LawcatRecurrent, Impl::Softmax);
    let bytes: Vec<usize> = of(Impl::LawcatRecurrent).iter().map(|r| r.peak_state_bytes).collect();
    let constant = bytes.len() == lengths.len() && bytes.windows(2).all(|w| w[0] == w[1]);
    let secs = t0.elapsed().as_secs_f64();
    let pass = matches!(lin, Ok(a) if a <= 1.3) && matches!(quad, Ok(a) if a >= 1.7) && cross.is_some() && constant && secs < 600.0;
    Outcome::new(
        pass,
        format!(
            "alpha lawcat_recurrent {:?} (<=1.3), softmax {:?} (>=1.7), crossover {:?}, state bytes {:?}, {secs:.0}s (limit 600s)",
            lin.map(|a| (a * 1000.0).round() / 1000.0).map_err(|e| e.to_string()),
            quad.map(|a| (a * 1000.0).round() / 1000.0).map_err(|e| e.to_string()),
            cross,
            bytes.first()
        ),
    )
}

fn tiny_recipe() -> RecipeConfig {
    let mut cfg = RecipeConfig::default();
    cfg.teacher = ModelConfig::teacher(cfg.teacher.vocab_size, 8, 1, 2, 16, 128);
    cfg.lawcat = LawcatConfig::new(8, 2).unwrap();
    cfg.task.train_len = 48;
    cfg.task.curriculum = vec![40, 48];
    cfg.task.eval_lengths = vec![48, 64];
    cfg.task.n_eval = 8;
    for t in [&mut cfg.pretrain, &mut cfg.distill, &mut cfg.finetune] {
        t.max_steps = 6;
        t.batch_size = 2;
    }
    cfg
}

fn run_artifacts(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let cfg = tiny_recipe();
    let mut log = RunLog::create(dir).unwrap();
    let (teacher, _) = train_teacher(&cfg, &mut log).unwrap();
    teacher.save(&dir.join("teacher")).unwrap();
    let (student, report) = run_student(&cfg, &teacher, Arm::SwaOn, 3, &mut log).unwrap();
    student.save(&dir.join("student")).unwrap();
    drop(log);
    let csv: String = report.accuracy.iter().map(|(l, a)| format!("{l},{a}\n")).collect();
    let bench = bench_prefill(
        &BenchConfig {
            check_up_to: 64,
            ..BenchConfig::default()
        },
        &[32, 64],
        5,
    )
    .unwrap();
    let bench_fields: String = bench
        .iter()
        .map(|r| format!("{},{},{},{:?}\n", r.imp.name(), r.seq_len, r.peak_state_bytes, r.failed))
        .collect();
    let mut out = vec![("accuracy.csv".to_string(), csv.into_bytes()), ("bench".to_string(), bench_fields.into_bytes())];
    for f in ["train.jsonl", "teacher/model.ckpt", "teacher/model_config.json", "student/model.ckpt", "student/model_config.json"] {
        out.push((f.to_string(), std::fs::read(dir.join(f)).unwrap()));
    }
    out
}

fn c9_reproducibility() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_artifacts(a.path());
    let rb = run_artifacts(b.path());
    let differing: Vec<&str> = ra.iter().zip(&rb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    Outcome::new(
        differing.is_empty(),
        format!("{} artifacts compared byte for byte, differing: {differing:?}", ra.len()),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("LAWCAT_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut failed = Vec::new();
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let t0 = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} [{name}]: {tag} | {} | {:.1}s", o.detail, t0.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(id);
        }
    };
    report(1, "oracle equivalence", &mut c1_oracle);
    report(2, "normalization invariants", &mut c2_normalization);
    report(3, "causality and locality", &mut c3_causality);
    report(4, "streaming equivalence", &mut c4_streaming);
    report(5, "gradient fidelity", &mut c5_gradients);
    let recipe = (wanted(6) || wanted(7)).then(recipe_runs);
    if let Some(r) = &recipe {
        report(6, "two-stage recipe", &mut || c6_recipe(r));
        report(7, "ablation harness", &mut || c7_ablations(r));
    }
    report(8, "scaling exponents", &mut c8_scaling);
    report(9, "reproducibility", &mut c9_reproducibility);
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
