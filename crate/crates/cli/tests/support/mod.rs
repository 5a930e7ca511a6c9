#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

pub const FULL_PIPELINE: [&str; 7] = ["ingest", "extract", "edit", "gen", "judge-corpus", "eval", "report"];

pub fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy/config.json")
}

pub fn fixture_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/toy")
        .join(name)
}

/// Runs one stage against `out`; extra args follow the common ones.
pub fn stage(name: &str, out: &Path, extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kgfpq"));
    cmd.arg(name)
        .arg("--config")
        .arg(fixture_config())
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("RUST_LOG", "warn")
        .stdin(Stdio::null());
    if name == "judge-corpus" {
        cmd.args(["--backend", "template"]);
    }
    cmd.output().expect("spawn kgfpq")
}

pub fn stage_ok(name: &str, out: &Path, extra: &[&str]) -> String {
    let o = stage(name, out, extra);
    assert!(
        o.status.success(),
        "{name} failed: {}\n{}",
        o.status,
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// Runs every non-interactive stage in order; returns the concatenated stdout.
pub fn full_run(out: &Path, extra: &[&str]) -> String {
    FULL_PIPELINE.iter().map(|s| stage_ok(s, out, extra)).collect()
}
