use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use lawcat::bench::{bench_prefill, crossover_length, fit_scaling_exponent, write_csv, write_gnuplot, BenchRow, Impl};
use lawcat::distill::{
    distill_student, evaluate_lengths, finetune_student, mix, run_student, train_teacher, AccuracyGrid, Arm,
    RecipeReport, RunLog, SweepReport, TaskConfig,
};
use lawcat::lawcat::oracle_check;
use lawcat::model::{student_grad_check, Model};
use lawcat::tasks::{dump_jsonl, evaluate, generate, Split, TaskKind};
use serde_json::{json, Value};

use crate::{CliError, Command, RunConfig, RUNS_ENV};

const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-8;
const DATA_STREAM: u64 = 0x6461_7461;

type CmdResult = Result<(), CliError>;

pub fn execute(cfg: &RunConfig, cmd: &Command) -> CmdResult {
    match cmd {
        Command::GenData(a) => gen_data(cfg, cmd, &a.task, &a.lengths, a.n, &a.split),
        Command::TrainTeacher => train(cfg, cmd),
        Command::Distill(a) => distill(cfg, cmd, &a.teacher, &a.arm),
        Command::Finetune(a) => finetune(cfg, cmd, &a.student),
        Command::Eval(a) => eval(cfg, cmd, &a.model, &a.lengths, &a.tasks, a.arm.as_deref()),
        Command::Ablate(a) => ablate(cfg, cmd, &a.arm, a.teacher.as_deref()),
        Command::Bench(a) => bench(cfg, cmd, &a.lengths, a.reps),
        Command::GradCheck(a) => grad_check(cfg, a.seeds, a.n),
        Command::OracleCheck(a) => oracle(a.n, a.seeds),
    }
}

fn command_name(cmd: &Command) -> String {
    match serde_json::to_value(cmd).expect("json") {
        Value::String(s) => s,
        Value::Object(m) => m.keys().next().cloned().unwrap_or_default(),
        _ => unreachable!(),
    }
}

/// `$LAWCAT_RUNS/{command}-{hash}-s{seed}`, with the resolved config and
/// the command arguments written into it.
fn run_dir(cfg: &RunConfig, cmd: &Command) -> Result<PathBuf, CliError> {
    let args = serde_json::to_value(cmd).expect("json");
    let root = std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    let dir = root.join(format!("{}-{}-s{}", command_name(cmd), cfg.hash(&args), cfg.seed));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    fs::write(dir.join("command.json"), serde_json::to_string_pretty(&args).expect("json") + "\n")?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(value).map_err(lawcat::Error::from)? + "\n")?;
    Ok(())
}

fn parse_arm(s: &str) -> Result<Arm, CliError> {
    Arm::parse(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn parse_task(s: &str) -> Result<TaskKind, CliError> {
    TaskKind::parse(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn save_model(model: &Model, dir: &Path, arm: &str, seed: u64) -> CmdResult {
    model.save(dir)?;
    write_json(&dir.join("meta.json"), &json!({"arm": arm, "seed": seed}))
}

fn stored_arm(dir: &Path, model: &Model) -> String {
    fs::read_to_string(dir.join("meta.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<Value>(&s).ok())
        .and_then(|v| v["arm"].as_str().map(String::from))
        .unwrap_or_else(|| if model.is_student() { "default" } else { "teacher" }.into())
}

fn lengths_or(given: &[usize], default: &[usize]) -> Vec<usize> {
    if given.is_empty() {
        default.to_vec()
    } else {
        given.to_vec()
    }
}

fn progress_log(dir: &Path) -> Result<RunLog, CliError> {
    let mut log = RunLog::create(dir)?;
    log.echo_every = 100;
    Ok(log)
}

fn grid_json(grid: &AccuracyGrid) -> Value {
    grid.iter().map(|(l, a)| json!({"seq_len": l, "accuracy": a})).collect()
}

fn gen_data(
    cfg: &RunConfig,
    cmd: &Command,
    task: &Option<String>,
    lengths: &[usize],
    n: Option<usize>,
    split: &str,
) -> CmdResult {
    let split = match split {
        "eval" => Split::Eval,
        "train" => Split::Train,
        other => return Err(CliError::Usage(format!("unknown split {other:?}"))),
    };
    let mut tc = cfg.recipe()?.task;
    if let Some(t) = task {
        tc.task = parse_task(t)?;
    }
    if let Some(n) = n {
        tc.n_eval = n;
    }
    let dir = run_dir(cfg, cmd)?.join("data");
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for len in lengths_or(lengths, &tc.eval_lengths) {
        let records = match split {
            Split::Eval => tc.eval_suite(len)?,
            Split::Train => (0..tc.n_eval)
                .map(|i| generate(tc.task, mix(mix(DATA_STREAM, cfg.seed), i as u64), len, tc.key_digits, split))
                .collect::<lawcat::Result<Vec<_>>>()?,
        };
        let split_name = if split == Split::Eval { "eval" } else { "train" };
        let path = dir.join(format!("{}-{len}-{split_name}.jsonl", tc.task.name()));
        dump_jsonl(&path, &records)?;
        files.push(path.display().to_string());
    }
    println!("{}", json!({"files": files}));
    Ok(())
}

fn train(cfg: &RunConfig, cmd: &Command) -> CmdResult {
    let recipe = cfg.recipe()?;
    let dir = run_dir(cfg, cmd)?;
    let mut log = progress_log(&dir)?;
    let (teacher, report) = train_teacher(&recipe, &mut log)?;
    let accuracy = evaluate_lengths(&teacher, &recipe.task)?;
    let out = dir.join("teacher");
    save_model(&teacher, &out, "teacher", cfg.seed)?;
    let summary = json!({"model": out, "pretrain": report, "accuracy": grid_json(&accuracy)});
    write_json(&dir.join("report.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn distill(cfg: &RunConfig, cmd: &Command, teacher: &Path, arm: &str) -> CmdResult {
    let arm = parse_arm(arm)?;
    let recipe = cfg.recipe()?;
    let teacher = Model::load(teacher)?;
    let dir = run_dir(cfg, cmd)?;
    let mut log = progress_log(&dir)?;
    let (student, report) = distill_student(&recipe, &teacher, arm, cfg.seed, &mut log)?;
    let out = dir.join("student");
    save_model(&student, &out, &arm.name(), cfg.seed)?;
    let summary = json!({"model": out, "arm": arm.name(), "distill": report, "loss_drop": report.drop()});
    write_json(&dir.join("report.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn finetune(cfg: &RunConfig, cmd: &Command, student_dir: &Path) -> CmdResult {
    let recipe = cfg.recipe()?;
    let mut student = Model::load(student_dir)?;
    if !student.is_student() {
        return Err(CliError::Runtime(lawcat::Error::Config(format!(
            "{} holds a teacher, not a distilled student",
            student_dir.display()
        ))));
    }
    let arm = stored_arm(student_dir, &student);
    let dir = run_dir(cfg, cmd)?;
    let mut log = progress_log(&dir)?;
    let report = finetune_student(&recipe, &mut student, cfg.seed, &mut log)?;
    let accuracy = evaluate_lengths(&student, &recipe.task)?;
    let out = dir.join("student");
    save_model(&student, &out, &arm, cfg.seed)?;
    let summary = json!({"model": out, "arm": arm, "finetune": report, "accuracy": grid_json(&accuracy)});
    write_json(&dir.join("report.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

pub const EVAL_HEADER: &str = "arm,task,seq_len,n,accuracy";

fn eval(cfg: &RunConfig, cmd: &Command, model_dir: &Path, lengths: &[usize], tasks: &[String], arm: Option<&str>) -> CmdResult {
    let base = cfg.recipe()?.task;
    let kinds = if tasks.is_empty() {
        vec![base.task]
    } else {
        tasks.iter().map(|t| parse_task(t)).collect::<Result<Vec<_>, _>>()?
    };
    let lengths = lengths_or(lengths, &base.eval_lengths);
    let model = Model::load(model_dir)?;
    let arm = arm.map(String::from).unwrap_or_else(|| stored_arm(model_dir, &model));
    let dir = run_dir(cfg, cmd)?;
    let mut csv = format!("{EVAL_HEADER}\n");
    for kind in kinds {
        let tc = TaskConfig {
            task: kind,
            eval_lengths: lengths.clone(),
            ..base.clone()
        };
        for &len in &lengths {
            let suite = tc.eval_suite(len)?;
            let acc = evaluate(&model, &suite, tc.answer_len())?;
            writeln!(csv, "{arm},{},{len},{},{acc}", kind.name(), suite.len()).unwrap();
        }
    }
    fs::write(dir.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub const GRID_HEADER: &str = "arm,task,seed,seq_len,n,accuracy";

fn ablate(cfg: &RunConfig, cmd: &Command, arm: &str, teacher: Option<&Path>) -> CmdResult {
    let arm = parse_arm(arm)?;
    let recipe = cfg.recipe()?;
    let dir = run_dir(cfg, cmd)?;
    let mut log = progress_log(&dir)?;
    let teacher = match teacher {
        Some(p) => Model::load(p)?,
        None => {
            let (t, report) = train_teacher(&recipe, &mut log)?;
            save_model(&t, &dir.join("teacher"), "teacher", cfg.seed)?;
            write_json(&dir.join("teacher").join("report.json"), &report)?;
            t
        }
    };
    let mut runs: Vec<RecipeReport> = Vec::new();
    for &seed in &cfg.seeds {
        let (student, report) = run_student(&recipe, &teacher, arm, seed, &mut log)?;
        save_model(&student, &dir.join(format!("student-s{seed}")), &arm.name(), seed)?;
        runs.push(report);
    }
    let sweep = SweepReport::from_runs(arm.name(), runs)?;
    let task = recipe.task.task.name();
    let n = recipe.task.n_eval;
    let mut csv = format!("{GRID_HEADER}\n");
    let mut rows = |label: &str, grid: &AccuracyGrid| {
        for (len, acc) in grid {
            writeln!(csv, "{},{task},{label},{len},{n},{acc}", arm.name()).unwrap();
        }
    };
    for r in &sweep.runs {
        rows(&r.seed.to_string(), &r.accuracy);
    }
    rows("best", &sweep.best_run().accuracy);
    rows("median", &sweep.median);
    rows("mean", &sweep.mean);
    fs::write(dir.join("grid.csv"), &csv)?;
    write_json(&dir.join("sweep.json"), &sweep)?;
    let best = dir.join(format!("student-s{}", sweep.best_run().seed));
    print!("{csv}");
    println!("{}", json!({"best_model": best}));
    Ok(())
}

fn bench(cfg: &RunConfig, cmd: &Command, lengths: &[usize], reps: Option<usize>) -> CmdResult {
    let bc = cfg.bench_config();
    let lengths = lengths_or(lengths, &cfg.bench.lengths);
    let reps = reps.unwrap_or(cfg.bench.reps);
    let dir = run_dir(cfg, cmd)?;
    let rows = bench_prefill(&bc, &lengths, reps)?;
    write_csv(&rows, &mut BufWriter::new(fs::File::create(dir.join("bench.csv"))?))?;
    write_gnuplot(&rows, &mut BufWriter::new(fs::File::create(dir.join("bench.dat"))?))?;
    let fits = fit_summary(&bc.impls, &rows);
    write_json(&dir.join("fits.json"), &fits)?;
    write_csv(&rows, &mut std::io::stdout().lock())?;
    println!("{fits}");
    Ok(())
}

fn fit_summary(impls: &[Impl], rows: &[BenchRow]) -> Value {
    let mut exponents = serde_json::Map::new();
    for &imp in impls {
        let own: Vec<BenchRow> = rows.iter().filter(|r| r.imp == imp && r.failed.is_none()).cloned().collect();
        let v = match fit_scaling_exponent(&own) {
            Ok(a) => json!(a),
            Err(e) => json!({"error": e.to_string()}),
        };
        exponents.insert(imp.name().into(), v);
    }
    json!({
        "exponents": exponents,
        "crossover_lawcat_recurrent_vs_softmax": crossover_length(rows, Impl::LawcatRecurrent, Impl::Softmax),
    })
}

fn grad_check(cfg: &RunConfig, seeds: u64, n: usize) -> CmdResult {
    let mut worst = 0.0f64;
    for seed in cfg.seed..cfg.seed + seeds {
        let r = student_grad_check(seed, 2, 16, n)?;
        worst = worst.max(r.max_relative_error);
    }
    println!("{}", json!({"seeds": seeds, "max_relative_error": worst, "tolerance": GRAD_TOL}));
    if worst < GRAD_TOL {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient relative error {worst:e} >= {GRAD_TOL:e}")))
    }
}

fn oracle(n: usize, seeds: u64) -> CmdResult {
    let r = oracle_check(n, seeds).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("max deviation {:e}", r.max_deviation);
    println!("{}", json!(r));
    if r.max_deviation < ORACLE_TOL {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "deviation {:e} >= {ORACLE_TOL:e} (seed {})",
            r.max_deviation, r.worst_seed
        )))
    }
}
