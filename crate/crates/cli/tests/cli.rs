//! End-to-end runs of the `sfl` binary.

use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const TRAIN: [&str; 11] = [
    "train", "--scheme", "sfl", "--model", "model1_mlp", "--data", "synth:easy", "--clients", "3", "--seed", "7",
];

fn sfl(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sfl"))
        .args(args)
        .current_dir(dir)
        .env_remove("SFL_SEED")
        .env_remove("SFL_PORT")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "sfl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn training_is_byte_for_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    sfl(a.path(), &TRAIN);
    sfl(b.path(), &TRAIN);
    for file in ["model.sflc", "metrics.csv"] {
        assert_eq!(read(a.path(), file), read(b.path(), file), "{file} differs");
    }
    let csv = String::from_utf8(read(a.path(), "metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,step,client_id,loss,train_acc,val_acc,bytes_up,bytes_down\n"));
}

#[test]
fn eval_reports_the_final_validation_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    sfl(dir.path(), &TRAIN);
    let csv = String::from_utf8(read(dir.path(), "metrics.csv")).unwrap();
    let last: f32 = csv.lines().last().unwrap().split(',').nth(5).unwrap().parse().unwrap();
    let out = sfl(dir.path(), &["eval", "model.sflc", "--data", "synth:easy"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let printed: f32 = stdout
        .strip_prefix("validation accuracy: ")
        .and_then(|s| s.split_whitespace().next())
        .unwrap_or_else(|| panic!("unexpected output {stdout:?}"))
        .parse()
        .unwrap();
    assert_eq!(printed, last);

    sfl(dir.path(), &["export", "model.sflc", "--out", "model.sflq"]);
    let out = sfl(dir.path(), &["eval", "model.sflq", "--data", "synth:easy", "--seed", "7"]);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("validation accuracy: "));
}

#[test]
fn serve_with_two_client_processes_matches_in_process_training() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--model", "model2_cnn", "--data", "synth:easy:6", "--seed", "3", "--epochs", "2"];
    let mut train = vec!["train", "--clients", "2", "--out", "local.sflc", "--metrics", "local.csv"];
    train.extend(common);
    sfl(dir.path(), &train);

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port().to_string();
    let mut serve = vec!["serve", "--port", &port, "--clients", "2", "--out", "tcp.sflc", "--metrics", "tcp.csv"];
    serve.extend(common);
    let server = Command::new(env!("CARGO_BIN_EXE_sfl"))
        .args(&serve)
        .current_dir(dir.path())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let clients: Vec<_> = ["1", "0"]
        .iter()
        .map(|id| {
            let seed_and_data = ["--data", "synth:easy:6", "--seed", "3"];
            Command::new(env!("CARGO_BIN_EXE_sfl"))
                .args(["client", "--port", &port, "--id", id, "--clients", "2"])
                .args(seed_and_data)
                .current_dir(dir.path())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in clients {
        assert!(c.wait().unwrap().success());
    }
    assert!(server.wait_with_output().unwrap().status.success());
    assert_eq!(read(dir.path(), "tcp.sflc"), read(dir.path(), "local.sflc"));
    assert_eq!(read(dir.path(), "tcp.csv"), read(dir.path(), "local.csv"));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "--model", "model9"],
        vec!["eval", "missing.sflc"],
        vec!["train", "--scheme", "fl", "--model", "model2_cnn"],
        vec!["train", "--data", "wav:/nonexistent"],
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_sfl")).args(&args).current_dir(dir.path()).output().unwrap();
        assert!(!out.status.success(), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert!(stderr.lines().any(|l| l.starts_with("error")), "{args:?}: {stderr}");
    }
}

#[test]
fn port_in_use_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let out = Command::new(env!("CARGO_BIN_EXE_sfl"))
        .args(["serve", "--port", &port])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("--port or SFL_PORT"));
}

#[test]
fn synth_and_mfcc_write_feature_files() {
    let dir = tempfile::tempdir().unwrap();
    sfl(dir.path(), &["synth", "--per-class", "2", "--difficulty", "hard", "--out", "s.sflf"]);
    assert_eq!(read(dir.path(), "s.sflf").len(), 8 + 14 * (1 + 650 * 4));
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/corpus");
    sfl(dir.path(), &["mfcc", corpus.to_str().unwrap(), "--out", "c.sflf"]);
    assert_eq!(read(dir.path(), "c.sflf").len(), 8 + 14 * (1 + 650 * 4));
    sfl(dir.path(), &["train", "--data", "sflf:c.sflf", "--epochs", "1", "--val-fraction", "0"]);
}
