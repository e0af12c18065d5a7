use std::path::Path;
use std::process::{Command, Output};

fn hexa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hexa"))
        .current_dir(dir)
        .env_remove("HEXA_OUTPUT_DIR")
        .args(args)
        .output()
        .expect("spawn hexa")
}

fn gen(dir: &Path, name: &str, count: &str, seed: &str) {
    let out = hexa(dir, &["gen-data", "--kind", "blobs", "--count", count, "--size", "8", "--seed", seed, "--out", name]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const TINY: &[&str] = &[
    "--set", "train_data=train.hxds",
    "--set", "test_data=test.hxds",
    "--set", "widths=4,8",
    "--set", "head_hidden=8",
    "--set", "proj_dim=6",
    "--set", "image_size=8",
    "--set", "crops=2x8",
    "--set", "queue_capacity=16",
    "--set", "k=3",
    "--set", "batch_size=6",
    "--set", "probe_epochs=2",
    "--set", "probe_runs=1",
    "--set", "epochs=2",
];

fn with(extra: &[&'static str]) -> Vec<&'static str> {
    TINY.iter().copied().chain(extra.iter().copied()).collect()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "train.hxds", "24", "0");
    gen(dir.path(), "test.hxds", "12", "1");
    dir
}

#[test]
fn pretrain_writes_metrics_and_checkpoint() {
    let dir = setup();
    let mut args = vec!["pretrain"];
    args.extend(with(&["--set", "pretext=dcluster", "--output-dir", "run"]));
    let out = hexa(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,scheme,loss_std,loss_adv,loss_cmx,loss_total,kmeans_objective,queue_size,wall_time_s"
    );
    assert_eq!(lines.count(), 2);

    let out = hexa(dir.path(), &["inspect-checkpoint", "run/last.hxck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("next epoch 2") && text.contains("bank.assignments"), "{text}");
}

#[test]
fn output_dir_from_environment() {
    let dir = setup();
    let mut args = vec!["pretrain"];
    args.extend(with(&["--set", "epochs=1"]));
    let out = Command::new(env!("CARGO_BIN_EXE_hexa"))
        .current_dir(dir.path())
        .env("HEXA_OUTPUT_DIR", "from-env")
        .args(&args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("from-env/last.hxck").exists());
}

#[test]
fn config_file_with_flag_override() {
    let dir = setup();
    std::fs::write(dir.path().join("run.cfg"), "# tiny run\nepochs = 5\noutput_dir = cfg-out\n").unwrap();
    let mut args = vec!["pretrain", "--config", "run.cfg"];
    args.extend(with(&["--set", "epochs=1"]));
    let out = hexa(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cfg-out/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn eval_reports_every_protocol() {
    let dir = setup();
    let mut args = vec!["pretrain"];
    args.extend(with(&["--set", "epochs=1", "--output-dir", "run"]));
    assert!(hexa(dir.path(), &args).status.success());
    let mut args = vec!["eval", "--checkpoint", "run/last.hxck"];
    args.extend(with(&[
        "--set", "low_shot_k=1,2",
        "--set", "finetune_fractions=0.5",
        "--set", "finetune_epochs=1",
        "--output-dir", "run",
    ]));
    let out = hexa(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("run/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
}

#[test]
fn exit_codes() {
    let dir = setup();
    assert_eq!(hexa(dir.path(), &["pretrain", "--set", "tmperature=0.2"]).status.code(), Some(2));
    assert_eq!(hexa(dir.path(), &["pretrain", "--set", "train_data=missing.hxds"]).status.code(), Some(3));
    std::fs::write(dir.path().join("bad.hxds"), b"HXDS\x01\0\0\0\x05\0\0\0").unwrap();
    assert_eq!(hexa(dir.path(), &["pretrain", "--set", "train_data=bad.hxds"]).status.code(), Some(3));
    assert_eq!(hexa(dir.path(), &["inspect-checkpoint", "train.hxds"]).status.code(), Some(3));
    assert_eq!(hexa(dir.path(), &["grid", "--kind", "nope"]).status.code(), Some(2));
}

#[test]
fn scheme_grid_has_six_rows() {
    let dir = setup();
    let mut args = vec!["grid", "--kind", "schemes"];
    args.extend(with(&["--set", "epochs=1", "--output-dir", "grid"]));
    let out = hexa(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("grid/grid-schemes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}
