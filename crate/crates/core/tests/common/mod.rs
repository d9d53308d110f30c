#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmffnn"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn pmffnn")
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn pmffnn")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write_file(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub const SMALL_CONFIG: &str = r#"{
  "kind": "pmffnn",
  "n_features": 12,
  "n_outputs": 3,
  "groups": { "auto": 3 },
  "pathway": { "hidden_dim": 8, "output_dim": 4 }
}"#;

pub const SMALL_SYNTH: &str = "groups=3,features=12,rows=300,classes=3";
