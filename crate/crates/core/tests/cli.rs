use std::path::{Path, PathBuf};

use kest_core::runner::cli::{run, EXIT_CONFIG, EXIT_OK};

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn kest(args: &[&str]) -> i32 {
    run(std::iter::once("kest").chain(args.iter().copied()))
}

#[test]
fn help_and_bad_usage_exit_codes() {
    assert_eq!(kest(&["--help"]), EXIT_OK);
    assert_eq!(kest(&["frobnicate"]), EXIT_CONFIG);
    assert_eq!(kest(&["--threads", "0", "verify"]), EXIT_CONFIG);
    assert_eq!(kest(&["verify", "--precision", "f32"]), EXIT_CONFIG);
}

#[test]
fn broken_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(tiny()).unwrap().replace("kernel_m = ", "kernel_width = ");
    std::fs::write(&bad, text).unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(kest(&["--out", out, "corpus", bad.to_str().unwrap()]), EXIT_CONFIG);
    assert_eq!(kest(&["--out", out, "corpus", "/nonexistent/config.toml"]), EXIT_CONFIG);
}

#[test]
fn corpus_command_writes_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(kest(&["--out", out, "corpus", tiny().to_str().unwrap()]), EXIT_OK);
    let run_dir = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    let config = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(config.starts_with("# config_hash="));
    for f in ["vocab.txt", "labeled.jsonl", "unlabeled.jsonl", "test.jsonl"] {
        assert!(run_dir.join("corpus").join(f).is_file(), "{f}");
    }
}
