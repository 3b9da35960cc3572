use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dwrl::dataset::{ReturnKind, TransitionDataset};
use dwrl::experiment::{four_room, optimal};

fn dwrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dwrl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dwrl(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, name: &str, kind: &str, n: &str, seed: &str) {
    ok(dir, &["fourroom-gen", "--n", n, "--seed", seed, "--kind", kind, "--out", name]);
}

const METHODS: &str = r#"
[[methods]]
id = "bc-pf"
algo = "bc"
weighting = "pf"

[[methods]]
id = "bc-aw"
algo = "bc"
weighting = "aw"

[[methods]]
id = "bc-dw"
algo = "bc"
weighting = "dw"
"#;

fn write_config(dir: &Path, seeds: &str, methods: &str) {
    let text = format!(
        "output = \"runs\"\nseeds = {seeds}\nsteps = 600\neval_every = 200\n\n[[datasets]]\nid = \"sub\"\npath = \"sub.txt\"\n{methods}"
    );
    fs::write(dir.join("exp.toml"), text).unwrap();
}

#[test]
fn generator_is_deterministic_and_suboptimal() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "a.txt", "suboptimal", "100", "3");
    gen(dir.path(), "b.txt", "suboptimal", "100", "3");
    let a = fs::read(dir.path().join("a.txt")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.txt")).unwrap());
    let ds = TransitionDataset::load(&dir.path().join("a.txt")).unwrap();
    assert_eq!(ds.num_trajectories(), 100);
    let env = four_room().unwrap();
    let v_star = optimal(&env.mdp).unwrap().value(env.start);
    let returns = ds.returns(ReturnKind::Discounted);
    assert!(returns.iter().all(|&g| g < v_star));
    assert!(returns.iter().any(|&g| g > 0.0));
}

#[test]
fn mix_modes_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "low.txt", "low", "100", "0");
    gen(d, "high.txt", "high", "100", "0");
    ok(d, &["mix", "--low", "low.txt", "--high", "high.txt", "--sigma", "0.05", "--out", "full.txt"]);
    let full = TransitionDataset::load(&d.join("full.txt")).unwrap();
    assert_eq!(full.num_trajectories(), 100);

    ok(d, &["mix", "--low", "low.txt", "--high", "high.txt", "--sigma", "0.05", "--mode", "diverse", "--out", "div.txt"]);
    let div = TransitionDataset::load(&d.join("div.txt")).unwrap();
    assert!(div.trajectories().all(|t| t.len() <= 50));

    ok(d, &[
        "mix", "--low", "low.txt", "--high", "high.txt", "--sigma", "0.5", "--mode", "small", "--budget", "500", "--out",
        "small.txt",
    ]);
    assert!(TransitionDataset::load(&d.join("small.txt")).unwrap().len() <= 500);

    let bad = dwrl(d, &["mix", "--low", "low.txt", "--high", "high.txt", "--sigma", "1.5", "--out", "x.txt"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("sigma"));
}

#[test]
fn stats_prints_csv() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "sub.txt", "suboptimal", "50", "0");
    let out = ok(dir.path(), &["stats", "--data", "sub.txt", "--bins", "4"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "metric,lo,hi,value");
    assert!(lines.iter().any(|l| l.starts_with("rpsv,,,")));
    assert!(lines.iter().any(|l| l.starts_with("mean_return,,,")));
    let hist: Vec<&&str> = lines.iter().filter(|l| l.starts_with("histogram,")).collect();
    assert_eq!(hist.len(), 4);
    let total: usize = hist.iter().map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 50);
}

#[test]
fn train_report_and_figure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "sub.txt", "suboptimal", "100", "0");
    write_config(d, "[0, 1, 2]", METHODS);
    ok(d, &["train", "--config", "exp.toml"]);

    let mut results = 0;
    for m in ["bc-pf", "bc-aw", "bc-dw"] {
        for s in 0..3 {
            let trace = fs::read_to_string(d.join(format!("runs/sub/{m}/seed{s}.csv"))).unwrap();
            let steps: Vec<&str> = trace.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
            assert_eq!(steps, ["200", "400", "600"]);
            results += 1;
        }
    }
    assert_eq!(results, 9);

    let manifest = fs::read_to_string(d.join("runs/manifest.toml")).unwrap();
    let first: Vec<Vec<u8>> = (0..3).map(|s| fs::read(d.join(format!("runs/sub/bc-dw/seed{s}.csv"))).unwrap()).collect();
    ok(d, &["train", "--config", "exp.toml"]);
    assert_eq!(manifest, fs::read_to_string(d.join("runs/manifest.toml")).unwrap());
    for (s, bytes) in first.iter().enumerate() {
        assert_eq!(bytes, &fs::read(d.join(format!("runs/sub/bc-dw/seed{s}.csv"))).unwrap());
    }
    assert!(manifest.contains("config_sha256"));

    ok(d, &["report", "--runs", "runs", "--out", "rep"]);
    let report = fs::read_to_string(d.join("rep/report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "method,iqm,ci_lo,ci_hi,n");
    assert_eq!(report.lines().count(), 4);
    assert!(d.join("rep/report_sub.csv").is_file());
    assert!(d.join("rep/report_long.csv").is_file());

    let tv = ok(d, &["fourroom-figure", "--runs", "runs", "--out", "fig.csv"]);
    assert_eq!(tv.lines().count(), 5);
    let fig = fs::read_to_string(d.join("fig.csv")).unwrap();
    let header: Vec<&str> = fig.lines().next().unwrap().split(',').collect();
    assert_eq!(header, ["s", "a", "behavior", "optimal", "pf", "aw", "dw"]);
    let rows: Vec<Vec<&str>> = fig.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let behavior: f64 = rows[..rows.len() - 1].iter().map(|r| r[2].parse::<f64>().unwrap()).sum();
    assert!((behavior - 1.0).abs() < 1e-9);
    let j: Vec<f64> = rows.last().unwrap()[2..].iter().map(|x| x.parse().unwrap()).collect();
    assert!(j.iter().all(|&x| x <= j[1] + 1e-12));
}

#[test]
fn failed_runs_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "sub.txt", "suboptimal", "50", "0");
    let methods = "[[methods]]\nid = \"ok\"\nalgo = \"bc\"\n\n[[methods]]\nid = \"broken\"\nalgo = \"bc\"\nweighting = \"pf\"\nk = 0.0\n";
    write_config(d, "[0, 1]", methods);
    let out = dwrl(d, &["train", "--config", "exp.toml"]);
    assert!(!out.status.success());
    for s in 0..2 {
        assert!(d.join(format!("runs/sub/ok/seed{s}.csv")).is_file());
        assert!(d.join(format!("runs/sub/broken/seed{s}.error")).is_file());
    }
    let manifest = fs::read_to_string(d.join("runs/manifest.toml")).unwrap();
    assert!(manifest.contains("ok = false"));

    ok(d, &["report", "--runs", "runs", "--out", "rep"]);
    let fig = dwrl(d, &["fourroom-figure", "--runs", "runs", "--out", "fig.csv"]);
    assert!(!fig.status.success());
    let err = String::from_utf8_lossy(&fig.stderr);
    assert!(err.contains("pf, aw, dw"), "{err}");
}

#[test]
fn report_rejects_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("runs")).unwrap();
    let out = dwrl(dir.path(), &["report", "--runs", "runs", "--out", "rep"]);
    assert!(!out.status.success());
    assert!(!dir.path().join("rep/report.csv").exists());
}

#[test]
fn config_validation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "sub.txt", "suboptimal", "20", "0");
    write_config(d, "[]", METHODS);
    let out = dwrl(d, &["train", "--config", "exp.toml"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no seeds"));
    write_config(d, "[0]", &format!("{METHODS}[[methods]]\nid = \"bc-dw\"\nalgo = \"cql\"\n"));
    let out = dwrl(d, &["train", "--config", "exp.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate method"));
    assert!(!d.join("runs/manifest.toml").exists());
}
