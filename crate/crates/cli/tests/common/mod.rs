//! Runs the `patchmap` binary against temporary project directories.
#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_patchmap"));
    cmd.env_remove("PATCHMAP_DATA_DIR");
    cmd
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin().arg("--project").arg(dir).args(args).output().expect("spawn patchmap")
}

/// Runs a command that must succeed and returns its stdout.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "patchmap {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Synthesized 256² four-texture image, tiled 64/32/32 (81 patches), a tiny
/// encoder, features and a 13-cluster map.
pub fn clustered_project(dir: &Path) {
    let img = dir.join("img.png");
    ok(dir, &["synth", "image", "--out", img.to_str().unwrap(), "--width", "256", "--height", "256", "--seed", "3"]);
    ok(dir, &["tile", "--in", img.to_str().unwrap(), "--patch", "64", "--stride", "32", "--pad", "32"]);
    ok(
        dir,
        &[
            "train", "--input-size", "32", "--token-patch", "8", "--embed-dim", "16", "--depth", "1", "--heads", "2",
            "--proto-dim", "16", "--epochs", "2", "--seed", "1",
        ],
    );
    ok(dir, &["extract"]);
    ok(dir, &["cluster", "--k", "13", "--seed", "2"]);
}

/// A running `patchmap serve --port 0`; killed on drop.
pub struct Server {
    child: Child,
    pub base: String,
}

impl Server {
    pub fn start(dir: &Path) -> Self {
        let mut child = bin()
            .arg("--project")
            .arg(dir)
            .args(["serve", "--port", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn server");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_string();
        Self { child, base: addr }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
