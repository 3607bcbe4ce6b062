use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdgame_core::harness::strip_metadata;
use cdgame_core::image::encode_netpbm;
use cdgame_core::sbm::two_color_image;

const FAST: [&str; 6] = ["--set", "detector.epochs=150", "--set", "attack.iterations=40", "--set", "defense.iterations=40"];

fn cdgame(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdgame")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = cdgame(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn with_fast<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(FAST);
    v
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn out_dir(root: &Path, name: &str) -> (PathBuf, String) {
    let p = root.join(name);
    let s = p.display().to_string();
    (p, s)
}

#[test]
fn attack_reports_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, s) = out_dir(tmp.path(), "run");
    let mut texts = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&dir);
        run_ok(&with_fast(&["detect", "--seed", "2", "-o", &s]));
        run_ok(&with_fast(&["attack", "--seed", "2", "-o", &s]));
        let report = fs::read_to_string(dir.join("seed-2/attack_report.json")).unwrap();
        texts.push((
            strip_metadata(&report).unwrap(),
            fs::read(dir.join("seed-2/attack.diff")).unwrap(),
            fs::read(dir.join("seed-2/attack_trace.csv")).unwrap(),
        ));
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn defense_consumes_the_attack_diff() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, s) = out_dir(tmp.path(), "chain");
    run_ok(&with_fast(&["detect", "--seed", "2", "-o", &s]));
    run_ok(&with_fast(&["attack", "--seed", "2", "-o", &s]));
    let diff = dir.join("seed-2/attack.diff");
    let elsewhere = tmp.path().join("attack.diff");
    fs::copy(&diff, &elsewhere).unwrap();
    let (dir2, s2) = out_dir(tmp.path(), "defended");
    let ckpt = dir.join("seed-2/detector.ckpt");
    run_ok(&with_fast(&[
        "defend",
        "--seed",
        "2",
        "-o",
        &s2,
        "--diff",
        elsewhere.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]));
    let report = read_json(&dir2.join("seed-2/defense_report.json"));
    let edits = fs::read_to_string(&diff).unwrap().lines().count() as u64;
    assert_eq!(report["results"]["input_diff"], elsewhere.to_str().unwrap());
    assert_eq!(report["results"]["attacked"]["budget_used"], edits, "{report:#}");
    let defense = fs::read_to_string(dir2.join("seed-2/defense.diff")).unwrap();
    assert!(defense.lines().count() <= 2);
}

#[test]
fn game_writes_a_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, s) = out_dir(tmp.path(), "game");
    run_ok(&with_fast(&["detect", "--seed", "1", "-o", &s]));
    run_ok(&with_fast(&["game", "--seed", "1", "-o", &s, "--set", "game.max_iterations=60"]));
    let csv = fs::read_to_string(dir.join("seed-1/game_trace.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    for col in ["iteration", "attack_loss", "defense_loss", "m1", "m2"] {
        assert!(header.split(',').any(|h| h == col), "{header}");
    }
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty() && rows.len() <= 60);
    let width = header.split(',').count();
    assert!(rows.iter().all(|r| r.split(',').count() == width));
    let report = read_json(&dir.join("seed-1/game_report.json"));
    assert!(report["results"]["converged"].is_boolean());
}

#[test]
fn dice_edits_match_the_recorded_list() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, s) = out_dir(tmp.path(), "dice");
    run_ok(&["baseline", "--method", "dice", "--seed", "0", "-o", &s, "--set", "detector.epochs=100"]);
    let got = fs::read_to_string(dir.join("seed-0/baseline_dice.diff")).unwrap();
    let want = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/dice_seed0.diff")).unwrap();
    assert_eq!(got, want);
}

#[test]
fn missing_input_file_exits_with_io_code() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere.edges");
    let feats = tmp.path().join("nowhere.csv");
    let out = cdgame(&[
        "detect",
        "--edges",
        missing.to_str().unwrap(),
        "--features",
        feats.to_str().unwrap(),
        "-o",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn bad_config_key_exits_with_usage_code() {
    let out = cdgame(&["detect", "--set", "detector.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn segment_defaults_and_oversized_k() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("halves.pgm");
    fs::write(&img, encode_netpbm(&two_color_image(8, 8))).unwrap();
    let img = img.to_str().unwrap();
    let (dir, s) = out_dir(tmp.path(), "seg");
    run_ok(&["segment", img, "--seed", "0", "-o", &s]);
    let report = read_json(&dir.join("seed-0/segment_report.json"));
    assert_eq!(report["results"]["segments"], 2, "{report:#}");
    assert!(dir.join("seed-0/segments.pgm").exists());

    let out = cdgame(&["segment", img, "-k", "65", "-o", &s]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selftest_passes_and_names_an_injected_bug() {
    let out = run_ok(&["selftest", "--points", "3", "--seed", "4"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{out}");

    let bad = cdgame(&["selftest", "--points", "3", "--seed", "4", "--inject-bug", "response"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8(bad.stdout).unwrap();
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failed.len(), 1, "{text}");
    assert!(failed[0].contains("response"));
}
