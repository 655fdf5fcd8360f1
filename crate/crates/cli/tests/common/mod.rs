#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Two users with overlapping tastes over four items. After leave-one-out
/// user 0 trains on {i0, i1} and holds out i2 for validation, user 1 trains
/// on {i0, i2} and holds out i1; i3 is both users' test item.
pub const TOY_LOG: &str = "u0 i0 1\nu0 i1 2\nu0 i2 3\nu0 i3 4\nu1 i0 1\nu1 i2 2\nu1 i1 3\nu1 i3 4\n";

pub fn write_toy(dir: &Path) -> PathBuf {
    let path = dir.join("toy.txt");
    fs::write(&path, TOY_LOG).unwrap();
    path
}

/// Four taste clusters of ten users, each user touching 6 of its cluster's
/// 10 items plus one popular item.
pub fn clustered_log() -> String {
    let mut s = String::new();
    for u in 0..40u32 {
        let c = u % 4;
        for k in 0..6u32 {
            let item = c * 10 + (3 * u + 7 * k) % 10;
            writeln!(s, "user{u} item{item} {}", 100 + k * 10 + u % 3).unwrap();
        }
        writeln!(s, "user{u} item40 {}", 50 + u).unwrap();
    }
    s
}

pub fn write_clustered(dir: &Path) -> PathBuf {
    let path = dir.join("clustered.txt");
    fs::write(&path, clustered_log()).unwrap();
    path
}

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gode-cf"));
    cmd.env("RUST_LOG", "warn").env_remove("GODE_CF_OUTPUT_ROOT");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}
