use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mp3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mp3"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mp3(args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

const TINY: [&str; 14] = [
    "--count",
    "16",
    "--eval-count",
    "8",
    "--depth",
    "1",
    "--heads",
    "2",
    "--dim",
    "8",
    "--batch",
    "8",
    "--mlp-ratio",
    "2",
];

#[test]
fn usage_errors_exit_nonzero() {
    let none = mp3(&[]);
    assert!(!none.status.success());
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert!(!mp3(&["frobnicate"]).status.success());
    assert!(!mp3(&["gen-data", "--no-such-flag", "1"]).status.success());
    assert!(!mp3(&["gen-data", "--eta", "lots"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let r = mp3(&["eval-pos", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--checkpoint"));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "gen-data",
            "--kind",
            "gradient-quadrants",
            "--count",
            "64",
            "--seed",
            "7",
            "--out",
            d.to_str().unwrap(),
        ]);
    }
    for name in ["train.mp3d", "eval.mp3d", "sample_0.ppm", "manifest.ini"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let c = dir.path().join("c");
    ok(&[
        "gen-data",
        "--count",
        "64",
        "--seed",
        "8",
        "--out",
        c.to_str().unwrap(),
    ]);
    assert_ne!(
        fs::read(a.join("train.mp3d")).unwrap(),
        fs::read(c.join("train.mp3d")).unwrap()
    );
}

#[test]
fn manifest_records_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.ini");
    fs::write(&cfg, "[train]\neta = 0.9\nsteps = 2\n").unwrap();
    let out = dir.path().join("pre");
    let mut args = vec![
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--eta",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(TINY);
    ok(&args);
    let manifest = fs::read_to_string(out.join("manifest.ini")).unwrap();
    assert!(manifest.contains("eta = 0.5\n"), "{manifest}");
    assert!(manifest.contains("steps = 2\n"));
    assert!(manifest.contains("checkpoint = pretrain.ckpt"));
    assert_eq!(csv_rows(&out.join("losses.csv")).len(), 2);

    // the manifest is itself a config that reproduces the run
    let again = dir.path().join("again");
    ok(&[
        "pretrain",
        "--config",
        out.join("manifest.ini").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(out.join("pretrain.ckpt")).unwrap(),
        fs::read(again.join("pretrain.ckpt")).unwrap()
    );
}

#[test]
fn data_files_feed_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen-data",
        "--kind",
        "two-shapes",
        "--count",
        "16",
        "--eval-count",
        "8",
        "--out",
        data.to_str().unwrap(),
    ]);
    let out = dir.path().join("scratch");
    let train = data.join("train.mp3d");
    let eval = data.join("eval.mp3d");
    let mut args = vec![
        "train-scratch",
        "--data",
        train.to_str().unwrap(),
        "--eval-data",
        eval.to_str().unwrap(),
        "--steps",
        "4",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(TINY);
    ok(&args);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.last().unwrap()[1].parse::<usize>().unwrap(), 4);
    assert!(rows.iter().all(|r| !r[5].is_empty()));
}

#[test]
fn sweeps_have_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eta");
    let mut args = vec![
        "sweep-eta",
        "--sweep-etas",
        "0,0.5,0.75",
        "--seeds",
        "2",
        "--pretrain-steps",
        "2",
        "--finetune-steps",
        "3",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(TINY);
    ok(&args);
    let rows = csv_rows(&out.join("sweep_eta.csv"));
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().any(|r| &r[0] == "0"));
    assert!(rows.iter().all(|r| &r[4] == "3"));
    let manifest = fs::read_to_string(out.join("manifest.ini")).unwrap();
    assert!(manifest.contains("finetune_steps = 3\n"));

    let out = dir.path().join("patch");
    let mut args = vec![
        "sweep-patch",
        "--patches",
        "4,8",
        "--height",
        "32",
        "--width",
        "32",
        "--pretrain-steps",
        "1",
        "--finetune-steps",
        "1",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(TINY);
    ok(&args);
    let rows = csv_rows(&out.join("sweep_patch.csv"));
    let positions: Vec<(&str, &str)> = rows.iter().map(|r| (&r[0], &r[1])).collect();
    assert_eq!(positions, [("4", "64"), ("8", "16")]);
    assert!(rows
        .iter()
        .all(|r| r.len() == 6 && !r[4].is_empty() && !r[5].is_empty()));
    let manifest = fs::read_to_string(out.join("manifest.ini")).unwrap();
    for name in [
        "mp3_patch4_r0.ckpt",
        "scratch_patch4_r0.ckpt",
        "mp3_patch8_r0.ckpt",
        "scratch_patch8_r0.ckpt",
    ] {
        assert!(manifest.contains(name), "{name}");
        assert!(out.join(name).exists());
    }
}

#[test]
fn invalid_patch_geometry_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    let r = mp3(&[
        "sweep-patch",
        "--patches",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn bench_reports_every_setting() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let mut args = vec![
        "bench",
        "--bench-etas",
        "0.3,0.75",
        "--bench-batch",
        "2",
        "--repeats",
        "3",
        "--warmups",
        "1",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(TINY);
    ok(&args);
    let rows = csv_rows(&out.join("bench.csv"));
    let modes: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(modes, ["mp3", "mp3", "supervised"]);
    let ctx: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(ctx, [11, 4, 16]);
    assert!(
        !mp3(&["bench", "--repeats", "2", "--out", out.to_str().unwrap()])
            .status
            .success()
    );
}
