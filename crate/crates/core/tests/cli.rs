//! End-to-end command behaviour: outputs, exit codes, reproducibility.

use std::path::Path;
use std::process::Command;

use lru_online::checkpoint;
use lru_online::cli::{main_with_args, ALIGNMENT_HEADER, METRICS_HEADER};

const TINY: &str = "[task]\npattern_len = 2\nbits = 2\npadding = 1\nnum_samples = 20\n\n[model]\nnum_layers = 2\nstate_size = 4\nmodel_size = 4\n\n[optim]\nbase_lr = 0.01\n\n[run]\nepochs = 2\nbatch_size = 10\n";

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["lru-online"];
    full.extend_from_slice(args);
    main_with_args(full)
}

#[test]
fn train_writes_metrics_checkpoint_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", TINY);
    let out = dir.path().join("run");
    assert_eq!(run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "1");
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap().is_finite()));
    let net = checkpoint::load(&out.join("checkpoint")).unwrap();
    assert_eq!(net.num_layers(), 2);
    // the echoed config reproduces the run on its own
    let echo = out.join("config.ini");
    let again = dir.path().join("again");
    assert_eq!(run(&["train", "--config", echo.to_str().unwrap(), "--out", again.to_str().unwrap()]), 0);
    assert_eq!(metrics, std::fs::read_to_string(again.join("metrics.csv")).unwrap());
}

#[test]
fn reruns_are_byte_identical_and_seed_matters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", &format!("{TINY}\n[align]\ndepths = 1, 2\nevery = 2\nprobe_size = 3\n"));
    let read = |sub: &str, file: &str| std::fs::read(dir.path().join(sub).join(file)).unwrap();
    for (cmd, file) in [("train", "metrics.csv"), ("align", "alignment.csv")] {
        for (sub, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
            let out = dir.path().join(format!("{cmd}-{sub}"));
            assert_eq!(run(&[cmd, "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]), 0);
        }
        assert_eq!(read(&format!("{cmd}-a"), file), read(&format!("{cmd}-b"), file), "{cmd}");
        assert_ne!(read(&format!("{cmd}-a"), file), read(&format!("{cmd}-c"), file), "{cmd}");
    }
}

#[test]
fn rule_flag_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", TINY);
    let out = dir.path().join("s");
    assert_eq!(run(&["train", "--config", &cfg, "--rule", "spatial", "--out", out.to_str().unwrap()]), 0);
    let echo = std::fs::read_to_string(out.join("config.ini")).unwrap();
    assert!(echo.contains("rule = spatial"));
}

#[test]
fn malformed_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    for text in ["[run]\nepochs = many\n", "[model]\nlayers = 2\n", "[align]\nevery = 5\n"] {
        let cfg = write(dir.path(), "bad.ini", text);
        let cmd = if text.contains("align") { "align" } else { "train" };
        assert_eq!(run(&[cmd, "--config", &cfg, "--out", o]), 2, "{text}");
    }
    assert_eq!(run(&["train", "--config", "/nonexistent/file.ini"]), 2);
    assert_eq!(run(&["train"]), 2);
}

#[test]
fn diverging_run_exits_3_with_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", &TINY.replace("base_lr = 0.01", "base_lr = 1e200"));
    let out = dir.path().join("nan");
    assert_eq!(run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]), 3);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2);
}

const GRADCHECK: &str = "[task]\npattern_len = 3\nbits = 2\npadding = 2\n\n[model]\nnum_layers = 1\nstate_size = 4\nmodel_size = 5\n\n[gradcheck]\nbatch_size = 2\n";

#[test]
fn gradcheck_passes_and_catches_corrupted_traces() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("g");
    let good = write(dir.path(), "g.ini", GRADCHECK);
    assert_eq!(run(&["gradcheck", "--config", &good, "--out", o.to_str().unwrap()]), 0);
    let bad = write(dir.path(), "b.ini", &format!("{GRADCHECK}corrupt_traces = true\n"));
    assert_eq!(run(&["gradcheck", "--config", &bad, "--out", o.to_str().unwrap()]), 1);
    let deep = write(dir.path(), "d.ini", &GRADCHECK.replace("num_layers = 1", "num_layers = 4"));
    assert_eq!(run(&["gradcheck", "--config", &deep, "--out", o.to_str().unwrap()]), 0);
}

#[test]
fn single_layer_alignment_is_exact_throughout_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.ini", &format!("{TINY}\n[align]\ndepths = 1, 3\nevery = 1\nprobe_size = 4\n"));
    let out = dir.path().join("al");
    assert_eq!(run(&["align", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let text = std::fs::read_to_string(out.join("alignment.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(ALIGNMENT_HEADER));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    let depth1: Vec<_> = rows.iter().filter(|r| r[0] == "1").collect();
    assert_eq!(depth1.len(), 5, "steps 0..=4");
    for r in &depth1 {
        assert!((r[5].parse::<f64>().unwrap() - 1.0).abs() <= 1e-6, "{r:?}");
    }
    let deep_means: Vec<f64> = rows.iter().filter(|r| r[0] == "3").map(|r| r[5].parse().unwrap()).collect();
    assert!(deep_means.iter().any(|&m| m < 1.0 - 1e-6));
}

#[test]
fn binary_reports_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.ini", "[run]\nseed = -1\n");
    let out = Command::new(env!("CARGO_BIN_EXE_lru-online"))
        .args(["train", "--config", &cfg])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(":2:"), "{stderr}");
}
