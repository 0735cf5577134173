//! Runs the `emvlab` binary end to end; each subcommand twice with the same
//! inputs must give byte-identical outputs.

use std::path::{Path, PathBuf};
use std::process::Command;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn emvlab(args: &[&str], cwd: &Path) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_emvlab"))
        .args(args)
        .current_dir(cwd)
        .env("EMVLAB_WORKERS", "2")
        .output()
        .expect("spawn emvlab");
    assert!(
        out.status.success(),
        "emvlab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Run `make` in two fresh directories and compare stdout and every file.
fn twice(make: impl Fn(&Path) -> Vec<u8>) -> usize {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (oa, ob) = (make(a.path()), make(b.path()));
    assert_eq!(oa, ob, "stdout differs");
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.0, y.0);
        assert!(x.1 == y.1, "{} differs", x.0);
    }
    assert!(!fa.is_empty());
    fa.len()
}

#[test]
fn net_gen() {
    twice(|d| {
        emvlab(
            &["net", "gen", "--rows", "3", "--cols", "4", "--len", "150", "--lanes", "2", "--ec", "0.2", "-o", "net.json"],
            d,
        )
    });
}

#[test]
fn sim_run() {
    let cfg = configs().join("grid3x3_smoke.json");
    let n = twice(|d| emvlab(&["sim", "run", "-c", cfg.to_str().unwrap(), "-o", "out"], d));
    assert_eq!(n, 2);
}

#[test]
fn sim_template_is_loadable() {
    let d = tempfile::tempdir().unwrap();
    let text = emvlab(&["sim", "template", "grid5x5-config1"], d.path());
    assert_eq!(text, std::fs::read(configs().join("grid5x5_config1.json")).unwrap());
}

#[test]
fn train() {
    let job = r#"{"scenario": "s.json", "episodes": 2, "n_bs": 16, "seed": 4}"#;
    twice(|d| {
        std::fs::copy(configs().join("grid3x3_smoke.json"), d.join("s.json")).unwrap();
        std::fs::write(d.join("train.json"), job).unwrap();
        emvlab(&["train", "-c", "train.json", "-o", "out"], d)
    });
}

#[test]
fn eval() {
    let matrix = r#"{
        "scenarios": [{"builtin": "grid3x3-smoke"}],
        "controllers": [{"policy": "fixed"}, {"policy": "greenwave+maxpressure"}],
        "routers": [{"mode": "static"}, {"mode": "decentralized"}],
        "no_emv_controllers": [{"policy": "maxpressure"}],
        "repetitions": 2,
        "seed": 8
    }"#;
    twice(|d| {
        std::fs::write(d.join("m.json"), matrix).unwrap();
        emvlab(&["eval", "--matrix", "m.json", "-o", "out"], d)
    });
}

#[test]
fn access_run() {
    let g = configs().join("access_toy");
    twice(|d| emvlab(&["access", "run", "--graph", g.to_str().unwrap(), "--alpha", "15", "--tau", "240", "-o", "out"], d));
}

#[test]
fn report_plot() {
    twice(|d| {
        std::fs::write(d.join("a.csv"), "episode,mean_reward\n0,-1\n1,-0.8\n2,-0.7\n").unwrap();
        std::fs::write(d.join("b.csv"), "episode,mean_reward\n0,-0.9\n2,-0.9\n").unwrap();
        emvlab(&["report", "plot", "-i", "a.csv=trained", "-i", "b.csv", "--title", "t", "-o", "fig/plot.svg"], d)
    });
}

#[test]
fn bad_input_fails_cleanly() {
    let d = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_emvlab"))
        .args(["sim", "run", "-c", "missing.json"])
        .current_dir(d.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}
