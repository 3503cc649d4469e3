#![allow(dead_code)]

//! Helpers for driving the `cnnic` binary in tests.

use std::path::{Path, PathBuf};
use std::process::Output;

/// Invoke the built binary with the given arguments and extra environment.
pub fn run_cnnic(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_cnnic"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn cnnic")
}

pub fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Fresh scratch directory under the system temp dir.
pub fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cnnic-cli-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Write synthetic IDX train/test files into `dir`.
pub fn write_synthetic_data(dir: &Path, n_train: usize, n_test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let (pixels, labels) = cnnic_data::synthetic_images(n_train, 1);
    std::fs::write(
        dir.join(cnnic_data::TRAIN_IMAGES),
        cnnic_data::write_idx_images(n_train, 28, 28, &pixels),
    )
    .unwrap();
    std::fs::write(
        dir.join(cnnic_data::TRAIN_LABELS),
        cnnic_data::write_idx_labels(&labels),
    )
    .unwrap();
    let (pixels, labels) = cnnic_data::synthetic_images(n_test, 2);
    std::fs::write(
        dir.join(cnnic_data::TEST_IMAGES),
        cnnic_data::write_idx_images(n_test, 28, 28, &pixels),
    )
    .unwrap();
    std::fs::write(
        dir.join(cnnic_data::TEST_LABELS),
        cnnic_data::write_idx_labels(&labels),
    )
    .unwrap();
}

pub fn write_config(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

/// Directory holding the canonical MNIST files, when present.
pub fn mnist_dir() -> Option<PathBuf> {
    let candidates: Vec<PathBuf> = std::env::var("CNNIC_DATA_DIR")
        .ok()
        .map(PathBuf::from)
        .into_iter()
        .chain([PathBuf::from("data"), PathBuf::from("../../data")])
        .collect();
    for dir in candidates {
        let all = [
            cnnic_data::TRAIN_IMAGES,
            cnnic_data::TRAIN_LABELS,
            cnnic_data::TEST_IMAGES,
            cnnic_data::TEST_LABELS,
        ]
        .iter()
        .all(|base| cnnic_data::resolve(&dir, base).is_ok());
        if all {
            return Some(dir);
        }
    }
    None
}
