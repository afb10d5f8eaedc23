use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_walkback"));
    c.env_remove("WALKBACK_SEED").env("RUST_LOG", "warn");
    c
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn data_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn train_small(dir: &Path, data: &Path, name: &str, epochs: &str) -> PathBuf {
    let out = dir.join(name);
    run_ok(
        bin()
            .args(["train", "--dataset"])
            .arg(data)
            .args([
                "--epochs",
                epochs,
                "--tmax",
                "16",
                "--n1",
                "1",
                "--hidden",
                "16",
                "--seed",
                "4",
                "--reversibility-chain",
                "60",
                "--out",
            ])
            .arg(&out),
    );
    out
}

#[test]
fn oracle_on_detailed_balance_chain() {
    let out = run_ok(
        bin()
            .arg("oracle")
            .arg("--chain")
            .arg(data_file("detailed_balance.chain")),
    );
    let r = json(&out.stdout);
    assert_eq!(r["temperatures"], serde_json::json!([1.0, 2.0, 4.0]));
    for s in r["per_state"].as_array().unwrap() {
        assert!(s["irreversibility_term"].as_f64().unwrap().abs() < 1e-12);
        assert!(s["decomposition_residual"].as_f64().unwrap() < 1e-10);
        assert!(s["split_residual"].as_f64().unwrap() < 1e-10);
    }
    for t in r["per_temperature"].as_array().unwrap() {
        assert!(t["detailed_balance_residual"].as_f64().unwrap() < 1e-14);
        assert!(t["reversal_max_diff"].as_f64().unwrap() < 1e-12);
    }
    assert!(r["max_decomposition_residual"].as_f64().unwrap() < 1e-10);
}

#[test]
fn oracle_accepts_an_explicit_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("oracle.json");
    run_ok(
        bin()
            .arg("oracle")
            .arg("--chain")
            .arg(data_file("detailed_balance.chain"))
            .args(["--temps", "1,1,2,4,4", "--out"])
            .arg(&report),
    );
    let r = json(&std::fs::read(&report).unwrap());
    assert_eq!(r["temperatures"].as_array().unwrap().len(), 5);
    assert!(dir.path().join("oracle.json.run.json").exists());
}

#[test]
fn divergence_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.txt");
    let q = dir.path().join("q.txt");
    std::fs::write(&p, "0.1 0.2 0.7\n").unwrap();
    std::fs::write(&q, "0.3,0.3,0.4\n").unwrap();
    let out = run_ok(
        bin()
            .arg("divergence")
            .arg("--p")
            .arg(&p)
            .arg("--q")
            .arg(&q)
            .args(["--pi", "0.3"]),
    );
    let r = json(&out.stdout);
    assert!(r["identity_diff"].as_f64().unwrap().abs() < 1e-12);
    assert_eq!(r["jeffreys"]["ordered"], Value::Bool(true));
}

#[test]
fn empty_sample_writes_an_empty_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    run_ok(
        bin()
            .args(["gen-data", "--dataset", "circle", "--n", "200", "--out"])
            .arg(&data),
    );
    let run = train_small(dir.path(), &data, "run", "1");
    let samples = dir.path().join("s.csv");
    run_ok(
        bin()
            .arg("sample")
            .arg("--checkpoint")
            .arg(run.join("checkpoint.json"))
            .args(["--n", "0", "--header", "--out"])
            .arg(&samples),
    );
    assert_eq!(std::fs::read(&samples).unwrap().len(), 0);
}

#[test]
fn full_pipeline_smoke() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("roll.csv");
    run_ok(
        bin()
            .args([
                "gen-data",
                "--dataset",
                "swiss-roll",
                "--n",
                "1000",
                "--seed",
                "2",
                "--header",
                "--out",
            ])
            .arg(&data),
    );
    let run = dir.path().join("run");
    run_ok(
        bin()
            .args(["train", "--dataset"])
            .arg(&data)
            .args(["--epochs", "2", "--out"])
            .arg(&run),
    );
    for f in ["checkpoint.json", "train_log.csv", "run_config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let samples = dir.path().join("samples.csv");
    run_ok(
        bin()
            .arg("sample")
            .arg("--checkpoint")
            .arg(run.join("checkpoint.json"))
            .args(["--n", "100", "--extra-flat-steps", "5", "--every-k", "4", "--out"])
            .arg(&samples),
    );
    let text = std::fs::read_to_string(&samples).unwrap();
    assert_eq!(text.lines().count(), 100);
    assert!(text
        .lines()
        .all(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).all(f64::is_finite)));
    assert!(dir.path().join("samples.csv.chain.csv").exists());

    let out = run_ok(
        bin()
            .arg("evaluate")
            .arg("--checkpoint")
            .arg(run.join("checkpoint.json"))
            .arg("--dataset")
            .arg(&data)
            .args(["--n-traj", "4"]),
    );
    let r = json(&out.stdout);
    let elbo = r["elbo"]["mean"].as_f64().unwrap();
    let ll = r["is_loglik"]["mean"].as_f64().unwrap();
    assert!(elbo.is_finite() && ll >= elbo);

    let out = run_ok(
        bin()
            .arg("diagnose")
            .arg("--checkpoint")
            .arg(run.join("checkpoint.json"))
            .args(["--chain-length", "200"]),
    );
    assert!(json(&out.stdout)["kl_per_step"].as_f64().unwrap().is_finite());
    assert!(start.elapsed() < Duration::from_secs(300));
}

#[test]
fn commands_are_deterministic_and_seed_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    run_ok(
        bin()
            .args(["gen-data", "--dataset", "gmm", "--n", "300", "--seed", "5", "--out"])
            .arg(&data),
    );
    let a = train_small(dir.path(), &data, "a", "2");
    let b = train_small(dir.path(), &data, "b", "2");
    let ck = |d: &Path| std::fs::read(d.join("checkpoint.json")).unwrap();
    assert_eq!(ck(&a), ck(&b));
    assert_eq!(
        std::fs::read(a.join("train_log.csv")).unwrap(),
        std::fs::read(b.join("train_log.csv")).unwrap()
    );

    let sample = |name: &str, seed: &str, env: Option<&str>| {
        let out = dir.path().join(name);
        let mut c = bin();
        if let Some(v) = env {
            c.env("WALKBACK_SEED", v);
        }
        run_ok(
            c.arg("sample")
                .arg("--checkpoint")
                .arg(a.join("checkpoint.json"))
                .args(["--n", "50", "--seed", seed, "--out"])
                .arg(&out),
        );
        std::fs::read(out).unwrap()
    };
    let s1 = sample("s1.csv", "7", None);
    assert_eq!(s1, sample("s2.csv", "7", None));
    assert_ne!(s1, sample("s3.csv", "8", None));
    assert_eq!(s1, sample("s4.csv", "8", Some("7")));
}

#[test]
fn train_config_file_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    run_ok(
        bin()
            .args(["gen-data", "--dataset", "circle", "--n", "200", "--out"])
            .arg(&data),
    );
    let a = train_small(dir.path(), &data, "a", "1");
    let b = dir.path().join("b");
    run_ok(
        bin()
            .arg("train")
            .arg("--config")
            .arg(a.join("run_config.json"))
            .arg("--out")
            .arg(&b),
    );
    assert_eq!(
        std::fs::read(a.join("checkpoint.json")).unwrap(),
        std::fs::read(b.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn errors_are_one_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["train".into(), "--out".into(), "x".into()],
        vec![
            "sample".into(),
            "--checkpoint".into(),
            dir.path().join("missing.json").display().to_string(),
            "--out".into(),
            "s.csv".into(),
        ],
        vec![
            "train".into(),
            "--dataset".into(),
            "nope".into(),
            "--out".into(),
            "x".into(),
        ],
        vec![
            "oracle".into(),
            "--chain".into(),
            data_file("detailed_balance.chain").display().to_string(),
            "--temps".into(),
            "3".into(),
        ],
    ];
    for args in cases {
        let out = bin().args(&args).current_dir(dir.path()).output().unwrap();
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8(out.stderr).unwrap();
        let lines: Vec<&str> = err.lines().collect();
        assert_eq!(lines.len(), 1, "{args:?}: {err}");
        assert!(lines[0].starts_with("error["), "{args:?}: {err}");
    }
}
