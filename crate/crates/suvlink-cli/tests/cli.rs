//! CLI-level acceptance checks: byte-identical reruns, funnel output shape,
//! and error exit codes.

use std::path::Path;
use std::process::Command;

fn suvlink() -> Command {
    Command::new(env!("CARGO_BIN_EXE_suvlink"))
}

fn write_config(dir: &Path, corpus: &Path, out: &Path) -> std::path::PathBuf {
    let path = dir.join("pipeline.toml");
    let toml = format!(
        "reports = {:?}\nvolumes_dir = {:?}\nout_dir = {:?}\ntranscripts = {:?}\nseed = 3\n",
        corpus.join("reports.jsonl"),
        corpus,
        out,
        corpus.join("transcripts.jsonl"),
    );
    std::fs::write(&path, toml).unwrap();
    path
}

/// Recursively collects (relative path, bytes) for comparison.
fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_all_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let corpus = dir.path().join(format!("corpus_{run}"));
        let status = suvlink()
            .args(["phantom", "--n", "6", "--seed", "3", "--inject", "--out"])
            .arg(&corpus)
            .status()
            .unwrap();
        assert!(status.success());
        let out = dir.path().join(format!("out_{run}"));
        let cfg = write_config(dir.path(), &corpus, &out);
        let status = suvlink()
            .args(["--config"])
            .arg(&cfg)
            .arg("run-all")
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = tree_bytes(&dir.path().join("out_a"));
    let b = tree_bytes(&dir.path().join("out_b"));
    assert_eq!(a.len(), b.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "{name_a} differs between reruns");
    }
    // The generated corpora themselves must also be byte-identical.
    assert_eq!(
        tree_bytes(&dir.path().join("corpus_a")),
        tree_bytes(&dir.path().join("corpus_b"))
    );
    println!("ACCEPTANCE run-all byte determinism: PASS");
}

#[test]
fn funnel_and_evaluate_render_reports() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert!(suvlink()
        .args(["phantom", "--n", "4", "--seed", "9", "--out"])
        .arg(&corpus)
        .status()
        .unwrap()
        .success());
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &corpus, &out);
    assert!(suvlink()
        .arg("--config")
        .arg(&cfg)
        .arg("run-all")
        .status()
        .unwrap()
        .success());

    let funnel = suvlink()
        .arg("--config")
        .arg(&cfg)
        .arg("funnel")
        .output()
        .unwrap();
    assert!(funnel.status.success());
    let text = String::from_utf8(funnel.stdout).unwrap();
    assert!(text.contains("Starting sentences"));
    assert!(text.contains("Sentences with Labels"));

    let eval = suvlink()
        .arg("--config")
        .arg(&cfg)
        .args(["evaluate", "--iterations", "200", "--pred"])
        .arg(out.join("manifest.jsonl"))
        .arg("--truth")
        .arg(corpus.join("truth.jsonl"))
        .output()
        .unwrap();
    assert!(eval.status.success());
    let text = String::from_utf8(eval.stdout).unwrap();
    assert!(text.contains("Matching SUVmax"), "got: {text}");
    assert!(text.contains("Any Overlap"));
    assert!(text.contains("Overall"));
}

#[test]
fn missing_reports_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &dir.path().join("nowhere"),
        &dir.path().join("out"),
    );
    let output = suvlink()
        .arg("--config")
        .arg(&cfg)
        .arg("parse")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = String::from_utf8(output.stderr).unwrap();
    assert!(err.contains("reports.jsonl"), "stderr: {err}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "mystery_knob = 1\n").unwrap();
    let status = suvlink()
        .arg("--config")
        .arg(&cfg)
        .arg("funnel")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
