use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_deep-bayo");

fn deep_bayo(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("DEEP_BAYO_JOBS")
        .output()
        .expect("spawn deep-bayo")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const QUICK: [&str; 8] = [
    "--set",
    "train.epochs=3",
    "--set",
    "analysis.grid_n=8",
    "--set",
    "analysis.n_latent=8",
    "--set",
    "analysis.posterior_samples=200",
];

fn quick_heat(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec!["run", "heat1d", "--out", out, "--seed", "4"];
    args.extend(QUICK);
    args.extend(["--set", "train.collocation.interior=64"]);
    args.extend(extra);
    deep_bayo(&args)
}

#[test]
fn run_writes_artifacts_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("heat");
    let o = quick_heat(&run, &["--set", "log_every=1"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    for f in [
        "config.toml",
        "history.csv",
        "metrics.json",
        "posterior.csv",
        "field.csv",
        "model.dbonet",
        "run.log",
        "data.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("run.log")).unwrap();
    assert!(log.contains("epoch      3"), "{log}");
    assert!(String::from_utf8_lossy(&o.stdout).contains("epoch      3"));
    let hist = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(hist.starts_with("epoch,"));
    assert_eq!(hist.lines().count(), 4);
    let post = fs::read_to_string(run.join("posterior.csv")).unwrap();
    assert_eq!(post.lines().next(), Some("D,alpha"));
}

#[test]
fn existing_run_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("heat");
    assert_eq!(code(&quick_heat(&run, &[])), 0);
    let o = quick_heat(&run, &[]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("--force"));
    assert_eq!(code(&quick_heat(&run, &["--force"])), 0);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let out = out.to_str().unwrap();
    let missing = dir.path().join("nope.toml");
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "heat1d", "--out", out, "--config", missing.to_str().unwrap()],
        vec!["run", "poisson", "--out", out],
        vec!["run", "heat1d", "--out", out, "--set", "train.epochs=0"],
        vec!["run", "heat1d", "--out", out, "--set", "no_such_key=1"],
        vec!["run", "heat1d", "--out", out, "--set", "profile=\"desk\""],
        vec!["run", "heat1d"],
        vec!["frobnicate"],
        vec!["gradcheck", "--widths", "4,8,1"],
    ];
    for args in cases {
        let o = deep_bayo(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", text(&o));
    }
    assert!(!dir.path().join("r").join("metrics.json").exists());
}

#[test]
fn divergence_exits_3_and_names_component() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("div");
    let o = quick_heat(&run, &["--set", "train.lr=1e250", "--set", "train.epochs=50"]);
    assert_eq!(code(&o), 3, "{}", text(&o));
    let err = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(err.contains("non-finite") && err.contains("epoch"), "{err}");
    let log = fs::read_to_string(run.join("run.log")).unwrap();
    assert!(log.contains("diverged at epoch"), "{log}");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&quick_heat(&a, &[])), 0);
    assert_eq!(code(&quick_heat(&b, &["--jobs", "2"])), 0);
    for f in ["metrics.json", "posterior.csv", "history.csv", "field.csv", "model.dbonet"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "experiment = \"heat1d\"\nseed = 9\n[train]\nepochs = 2\n").unwrap();
    let run = dir.path().join("r");
    let o = deep_bayo(&[
        "run",
        "heat1d",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--set",
        "analysis.grid_n=6",
        "--set",
        "analysis.posterior_samples=50",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let written = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(written.contains("seed = 9"), "{written}");
    assert_eq!(fs::read_to_string(run.join("history.csv")).unwrap().lines().count(), 3);

    fs::write(&cfg, "experiment = \"rd2d\"\n").unwrap();
    let o = deep_bayo(&["run", "heat1d", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "--force"]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn gradcheck_passes_and_fault_fails() {
    let o = deep_bayo(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    for row in ["first-order", "second-order", "nested"] {
        assert!(out.contains(row), "{out}");
    }
    let o = deep_bayo(&["gradcheck", "--inject-fault"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn sweep_ranks_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    fs::write(
        &grid,
        r#"experiment = "heat1d"
set = ["train.collocation.interior=32", "sensors.n_interior=20"]
validation_points = 20

[[weights]]
interior = 1.0
ic = 3.0
bc = 1.0
data = 6.0
std = 1.0
extra = 0.0

[[weights]]
interior = 1.0
ic = 1.0
bc = 1.0
data = 1.0
std = 1.0
extra = 0.0
"#,
    )
    .unwrap();
    let out = dir.path().join("sw");
    let args = ["sweep", "--grid", grid.to_str().unwrap(), "--budget", "2", "--out", out.to_str().unwrap()];
    let o = deep_bayo(&args);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rank,index,interior,ic,bc,data,std,extra,score");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));

    let mut zero = args;
    zero[4] = "0";
    assert_eq!(code(&deep_bayo(&zero)), 2);
}

#[test]
fn sweep_single_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    fs::write(
        &grid,
        "experiment = \"heat1d\"\nset = [\"train.collocation.interior=16\"]\nvalidation_points = 10\n\
         [[weights]]\ninterior = 1.0\nic = 1.0\nbc = 1.0\ndata = 1.0\nstd = 1.0\nextra = 0.0\n",
    )
    .unwrap();
    let out = dir.path().join("sw");
    let o = deep_bayo(&["sweep", "--grid", grid.to_str().unwrap(), "--budget", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 2);
}

fn fake_rd_run(dir: &Path, k_mean: f64, k_std: f64) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("config.toml"), "experiment = \"rd2d\"\nprofile = \"desk\"\n").unwrap();
    fs::write(
        dir.join("metrics.json"),
        format!("{{\"param.k.mean\": {k_mean}, \"param.k.std\": {k_std}, \"param.k.mode\": {k_mean}}}"),
    )
    .unwrap();
}

#[test]
fn report_tables_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    fake_rd_run(&a, 0.99, 0.004);
    fake_rd_run(&b, 1.01, 0.006);
    let out = dir.path().join("rep");
    let args = ["report", "--runs", a.to_str().unwrap(), b.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let o = deep_bayo(&args);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let txt = fs::read_to_string(out.join("tables.txt")).unwrap();
    assert!(txt.contains("1.003 / 5.75e-3"), "{txt}");
    assert!(txt.contains("1.000 / 5.00e-3"), "{txt}");
    let json = fs::read(out.join("tables.json")).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert_eq!(v["reaction_rate"].as_array().unwrap().len(), 5);

    assert_eq!(code(&deep_bayo(&args)), 0);
    assert_eq!(fs::read(out.join("tables.json")).unwrap(), json);
    assert_eq!(fs::read_to_string(out.join("tables.txt")).unwrap(), txt);
}

#[test]
fn report_lists_runs_without_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good");
    fake_rd_run(&good, 1.0, 0.01);
    let bad1 = dir.path().join("bad1");
    let bad2 = dir.path().join("bad2");
    fs::create_dir_all(&bad1).unwrap();
    let o = deep_bayo(&[
        "report",
        "--runs",
        good.to_str().unwrap(),
        bad1.to_str().unwrap(),
        bad2.to_str().unwrap(),
        "--out",
        dir.path().join("rep").to_str().unwrap(),
    ]);
    assert_ne!(code(&o), 0);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad1") && err.contains("bad2") && !err.contains("good"), "{err}");
}
