use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [0]

[model]
d_model = 8
n_layers = 1
n_heads = 2
d_ff = 16
max_seq = 128

[lawcat]
d_feat = 4
gate_rank = 4

[task]
train_len = 48
curriculum = [48]
eval_lengths = [48, 64]
n_eval = 4

[pretrain]
max_steps = 4
batch_size = 2

[distill]
max_steps = 4
batch_size = 2

[finetune]
max_steps = 4
batch_size = 2
"#;

fn lawcat(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lawcat"))
        .args(args)
        .env("LAWCAT_RUNS", runs)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn json_line(out: &str) -> serde_json::Value {
    let line = out.lines().rev().find(|l| l.starts_with('{')).expect("json line");
    serde_json::from_str(line).unwrap()
}

fn only_run_dir(root: &Path, prefix: &str) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

#[test]
fn help_on_every_subcommand_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in [
        "gen-data",
        "train-teacher",
        "distill",
        "finetune",
        "eval",
        "ablate",
        "bench",
        "grad-check",
        "oracle-check",
    ] {
        let o = lawcat(tmp.path(), &[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage: lawcat"), "{sub}");
    }
    assert_eq!(lawcat(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(lawcat(tmp.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["oracle-check", "--bogus"],
        vec!["no-such-command"],
        vec!["--set", "lawcat.nope=1", "oracle-check"],
        vec!["--set", "model.d_model=abc", "oracle-check"],
        vec!["--set", "model.n_heads=3", "oracle-check"],
        vec!["--config", "/nonexistent/cfg.toml", "oracle-check"],
        vec!["ablate", "no-such-arm"],
        vec!["gen-data", "--split", "nope"],
    ];
    for args in cases {
        let o = lawcat(tmp.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        let err: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
        assert_eq!(err["error"], "usage", "{args:?}");
        assert_eq!(stderr(&o).trim().lines().count(), 1);
    }
}

#[test]
fn missing_model_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lawcat(tmp.path(), &["eval", "--model", "/nonexistent/model"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json_line(&stderr(&o))["error"], "runtime");
}

#[test]
fn oracle_check_prints_deviation() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lawcat(tmp.path(), &["oracle-check", "--n", "64", "--seeds", "50"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("max deviation "));
    let r = json_line(&stdout(&o));
    assert_eq!(r["instances"], 50);
    assert!(r["max_deviation"].as_f64().unwrap() < 1e-8);
}

#[test]
fn grad_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lawcat(tmp.path(), &["grad-check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(json_line(&stdout(&o))["max_relative_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn json_config_and_set_overrides_are_merged() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.json");
    fs::write(&p, r#"{"distill": {"lr": 0.05}, "task": {"n_eval": 7}}"#).unwrap();
    let o = lawcat(
        tmp.path(),
        &["--config", p.to_str().unwrap(), "--set", "task.n_eval=9", "--print-config", "oracle-check"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg: toml::Table = stdout(&o).parse().unwrap();
    assert_eq!(cfg["distill"]["lr"].as_float(), Some(0.05));
    assert_eq!(cfg["task"]["n_eval"].as_integer(), Some(9));
    assert_eq!(cfg["lora"]["rank"].as_integer(), Some(8));
}

#[test]
fn gen_data_writes_suites_under_hashed_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let o = lawcat(&runs, &["gen-data", "--lengths", "40,64", "--n", "3", "--task", "niah2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = only_run_dir(&runs, "gen-data-");
    let name = dir.file_name().unwrap().to_string_lossy().into_owned();
    let hash = name.trim_start_matches("gen-data-").trim_end_matches("-s0");
    assert_eq!(hash.len(), 12);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert!(dir.join("config.toml").exists());
    let records = lawcat::tasks::load_jsonl(&dir.join("data/niah2-64-eval.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.tokens.len() == 64));

    // Another seed lands in another directory; the same config in the same one.
    assert_eq!(lawcat(&runs, &["gen-data", "--lengths", "40,64", "--n", "3", "--task", "niah2", "--seed", "1"]).status.code(), Some(0));
    assert!(dir.with_file_name(format!("gen-data-{hash}-s1")).exists());
    assert_eq!(lawcat(&runs, &["gen-data", "--lengths", "40,64", "--n", "3", "--task", "niah2"]).status.code(), Some(0));
    assert_eq!(fs::read_dir(&runs).unwrap().count(), 2);
}

fn read_tree(dir: &Path, out: &mut Vec<(String, Vec<u8>)>, base: &Path) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            read_tree(&p, out, base);
        } else if p.file_name().unwrap() != "timing.jsonl" {
            out.push((p.strip_prefix(base).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
}

#[test]
fn pipeline_runs_and_reproduces_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let mut trees = Vec::new();
    for _ in 0..2 {
        let runs = tmp.path().join("runs");
        let o = lawcat(&runs, &["--config", cfg, "train-teacher"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let teacher = json_line(&stdout(&o))["model"].as_str().unwrap().to_string();

        let o = lawcat(&runs, &["--config", cfg, "distill", "--teacher", &teacher, "--arm", "share-conv"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let student = json_line(&stdout(&o))["model"].as_str().unwrap().to_string();

        let o = lawcat(&runs, &["--config", cfg, "finetune", "--student", &student]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let tuned = json_line(&stdout(&o))["model"].as_str().unwrap().to_string();

        let o = lawcat(&runs, &["--config", cfg, "eval", "--model", &tuned, "--lengths", "48,96", "--tasks", "passkey,niah1"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let csv = stdout(&o);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "arm,task,seq_len,n,accuracy");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("share-conv,passkey,48,4,"));
        assert!(lines[4].starts_with("share-conv,niah1,96,4,"));

        let o = lawcat(&runs, &["--config", cfg, "--set", "seeds=[0,1]", "ablate", "no-norm", "--teacher", &teacher]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let grid = stdout(&o);
        assert!(grid.starts_with("arm,task,seed,seq_len,n,accuracy\n"));
        for label in ["0", "1", "best", "median", "mean"] {
            assert!(grid.contains(&format!("no-norm,passkey,{label},64,4,")), "{label}");
        }
        let best = json_line(&grid)["best_model"].as_str().unwrap().to_string();
        assert!(Path::new(&best).join("meta.json").exists());

        let mut tree = Vec::new();
        read_tree(&runs, &mut tree, &runs);
        trees.push(tree);
        // The second pass writes to the same paths from scratch.
        fs::remove_dir_all(&runs).unwrap();
    }
    assert!(trees[0].iter().any(|(p, _)| p.ends_with("train.jsonl")));
    assert!(trees[0].iter().any(|(p, _)| p.ends_with("model.ckpt")));
    let names = |t: &Vec<(String, Vec<u8>)>| t.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
    assert_eq!(names(&trees[0]), names(&trees[1]));
    for ((p, a), (_, b)) in trees[0].iter().zip(&trees[1]) {
        assert!(a == b, "{p} differs between identical runs");
    }
}

#[test]
fn ablate_trains_its_own_teacher() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let runs = tmp.path().join("runs");
    let o = lawcat(&runs, &["--config", cfg.to_str().unwrap(), "ablate", "gate-rank=2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = only_run_dir(&runs, "ablate-");
    assert!(dir.join("teacher/meta.json").exists());
    assert!(dir.join("grid.csv").exists());
    let sweep: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["arm"], "gate-rank=2");
}

#[test]
fn bench_writes_csv_gnuplot_and_fits() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let o = lawcat(&runs, &["bench", "--lengths", "32,64,128,256", "--reps", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = only_run_dir(&runs, "bench-");
    let csv = fs::read_to_string(dir.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 4);
    assert!(csv.starts_with(lawcat::bench::CSV_HEADER));
    assert!(dir.join("bench.dat").exists());
    let fits: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("fits.json")).unwrap()).unwrap();
    assert!(fits["exponents"]["lawcat_recurrent"].is_number());
}

#[test]
fn dispatch_is_callable_in_process() {
    assert_eq!(lawcat_cli::cli_dispatch(["lawcat", "oracle-check", "--n", "8", "--seeds", "3"]), 0);
    assert_eq!(lawcat_cli::cli_dispatch(["lawcat", "oracle-check", "--n", "0"]), 2);
    assert_eq!(lawcat_cli::cli_dispatch(["lawcat", "--help"]), 0);
}
