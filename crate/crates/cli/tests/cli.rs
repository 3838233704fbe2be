//! The `fedcl` binary driven as a subprocess.

use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use fedcl::config::ExperimentConfig;
use fedcl::data::read_dataset;
use fedcl_cli::{run_ablation, serve_on, EXIT_RUNTIME, EXIT_VALIDATION};

const SMALL: &str = r#"
seed = 7

[federation]
rounds = 1
clients = 2
mode = "cl_ff_nm"

[data]
num_classes = 4
per_class_n = 50

[bank]
capacity = 64
upload_size = 64

[objective]
candidate_count = 64

[probe]
holdout_per_class = 20
"#;

fn fedcl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedcl"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    fedcl().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn generate_writes_every_sample_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["--config", s(&cfg), "--out", s(out), "generate"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ds = read_dataset(&a.join("dataset.fcld")).unwrap();
    assert_eq!(ds.len(), 4 * 50);
    assert_eq!(
        std::fs::read(a.join("dataset.fcld")).unwrap(),
        std::fs::read(b.join("dataset.fcld")).unwrap()
    );
}

#[test]
fn unwritable_output_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = blocker.join("sub");
    let o = run(&["--config", s(&cfg), "--out", s(&out), "generate"]);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&o.stderr).contains(s(&out)));
}

#[test]
fn missing_key_is_a_validation_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("rounds = 1\n", ""));
    let o = run(&["--config", s(&cfg), "--out", s(dir.path()), "simulate"]);
    assert_eq!(o.status.code(), Some(EXIT_VALIDATION));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rounds"));
}

#[test]
fn bad_flags_are_validation_errors() {
    assert_eq!(run(&["--mode", "fancy", "simulate"]).status.code(), Some(EXIT_VALIDATION));
    assert_eq!(run(&["teleport"]).status.code(), Some(EXIT_VALIDATION));
}

#[test]
fn single_round_smoke_run_is_quick_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let start = Instant::now();
    let o = run(&["--config", s(&cfg), "--out", s(&out), "simulate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed() < Duration::from_secs(10));
    for f in ["metrics.csv", "metrics.jsonl", "rounds.jsonl", "summary.json", "model.bin", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rounds"], 1);
    let v = run(&["validate-metrics", s(&out.join("metrics.csv"))]);
    assert!(v.status.success());
    // the written config reproduces the run
    let saved = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(saved.digest(), ExperimentConfig::from_toml_str(SMALL).unwrap().digest());
}

#[test]
fn neighbourhood_loss_appears_only_with_matching() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("rounds = 1", "rounds = 2"));
    for mode in ["cl", "cl_ff", "cl_ff_nm"] {
        let out = dir.path().join(mode);
        let o = run(&["--config", s(&cfg), "--out", s(&out), "--mode", mode, "simulate"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        let neigh: Vec<f64> = column(&csv, "neigh_loss").iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(column(&csv, "mode"), vec![mode; 2]);
        if mode == "cl_ff_nm" {
            assert!(neigh.iter().all(|&v| v > 0.0), "{neigh:?}");
        } else {
            assert!(neigh.iter().all(|&v| v == 0.0), "{mode}: {neigh:?}");
        }
    }
}

#[test]
fn single_repeat_ablation_has_zero_spread() {
    let mut cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    cfg.federation.rounds = 2;
    let summary = run_ablation(&cfg, 1).unwrap();
    assert_eq!(summary.runs.len(), 3);
    for m in &summary.modes {
        assert_eq!(m.std_knn, 0.0);
    }
    assert!(run_ablation(&cfg, 0).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &SMALL.replace("rounds = 1", "rounds = 2"));
    let o = run(&["--config", s(&path), "--out", s(dir.path()), "ablate", "--repeats", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(dir.path().join("ablation.json").exists());
}

#[test]
fn serve_and_client_binaries_complete_a_session() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("rounds = 1", "rounds = 2");
    let cfg = write_config(dir.path(), &text);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let out = dir.path().join("wire");
    let mut server = fedcl()
        .env("RUST_LOG", "info")
        .args(["--config", s(&cfg), "--out", s(&out), "serve", "--bind", &addr])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(server.stderr.take().unwrap()).lines();
    loop {
        let line = lines.next().expect("server exited before listening").unwrap();
        if line.contains("listening on") {
            break;
        }
    }
    let drain = thread::spawn(move || lines.count());
    let children: Vec<_> = (0..2)
        .map(|id| {
            fedcl()
                .args(["--config", s(&cfg), "client", "--server", &addr, "--id", &id.to_string()])
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    let clients: Vec<Output> = children.into_iter().map(|c| c.wait_with_output().unwrap()).collect();
    let status = server.wait().unwrap();
    drain.join().unwrap();
    for c in &clients {
        assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
        assert!(String::from_utf8_lossy(&c.stdout).contains("trained 2 rounds"));
    }
    assert!(status.success());

    let sim = dir.path().join("sim");
    assert!(run(&["--config", s(&cfg), "--out", s(&sim), "simulate"]).status.success());
    assert_eq!(
        std::fs::read(out.join("model.bin")).unwrap(),
        std::fs::read(sim.join("model.bin")).unwrap()
    );
}

#[test]
fn serve_on_accepts_in_process_clients() {
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut server_cfg = cfg.clone();
    server_cfg.output.dir = Some(dir.path().to_path_buf());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handles: Vec<_> = (0..2)
        .map(|id| {
            let c = cfg.clone();
            thread::spawn(move || fedcl_cli::cmd_client(addr, &c, id, None).unwrap())
        })
        .collect();
    let summary = serve_on(&listener, &server_cfg).unwrap();
    for h in handles {
        assert_eq!(h.join().unwrap().rounds_trained, 1);
    }
    assert_eq!(summary.rounds, 1);
    assert!(dir.path().join("metrics.csv").exists());
}
