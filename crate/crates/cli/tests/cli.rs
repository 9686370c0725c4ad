use std::path::Path;
use std::process::{Command, Output};

use mapoca_core::trainer::read_metrics;

fn mapoca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapoca"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mapoca(args);
    assert!(
        out.status.success(),
        "mapoca {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(path: &Path) -> Vec<mapoca_core::trainer::MetricsRow> {
    read_metrics(std::fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn train_smoke_writes_monotone_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["train", "--set", "max_steps=1000", "--quiet", "--out", s(dir.path())]);
    let csv = dir.path().join("mapoca_simple_spread_seed0/metrics.csv");
    assert_eq!(stdout.trim(), csv.display().to_string());
    let r = rows(&csv);
    assert!(!r.is_empty());
    assert!(r.windows(2).all(|w| w[0].step < w[1].step));
    assert_eq!(r.last().unwrap().step, 1000);
}

#[test]
fn metadata_records_config_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "train", "--set", "env=baton_relay", "--set", "algorithm=coma", "--set", "max_steps=400", "--quiet", "--out",
        s(dir.path()),
    ]);
    let text = std::fs::read_to_string(dir.path().join("coma_baton_relay_seed0/metadata.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(meta["command"], "train");
    assert_eq!(meta["status"], "ok");
    assert_eq!(meta["config"]["max_steps"], "400");
    assert_eq!(meta["provenance"]["max_steps"], "user");
    assert_eq!(meta["provenance"]["lr"], "default");
    assert!(meta["wall_time_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn seeds_expand_to_one_run_each() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["train", "--set", "max_steps=200", "--seeds", "1,4", "--quiet", "--out", s(dir.path())]);
    assert_eq!(stdout.lines().count(), 2);
    for seed in [1, 4] {
        assert!(dir.path().join(format!("mapoca_simple_spread_seed{seed}/metrics.csv")).exists());
    }
}

#[test]
fn config_errors_exit_with_code_two() {
    for args in [
        &["train", "--set", "bogus=1"][..],
        &["train", "--set", "algorithm=ppo", "--set", "heads=2"],
        &["train", "--set", "attention_layers=2"],
        &["meanlab", "--set", "o_abs=0.4"],
        &["train", "--seeds", "3-1"],
    ] {
        let out = mapoca(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn meanlab_writes_one_curve_per_run() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "meanlab", "--ranges", "8-10", "--seeds", "2", "--set", "steps=20", "--set", "eval_every=10", "--quiet", "--out",
        s(dir.path()),
    ]);
    let ml = dir.path().join("meanlab");
    let mut names: Vec<String> = std::fs::read_dir(&ml)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "aggregate.csv")
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "attention_r8-10_abs0_seed0.csv",
            "attention_r8-10_abs0_seed1.csv",
            "fc_r8-10_abs0_seed0.csv",
            "fc_r8-10_abs0_seed1.csv"
        ]
    );
    let agg = std::fs::read_to_string(ml.join("aggregate.csv")).unwrap();
    // header plus steps 0, 10, 20 for both models
    assert_eq!(agg.lines().count(), 7);
    assert!(agg.starts_with("config,step,n,mean,ci_low,ci_high"));
}

#[test]
fn compare_flags_single_runs_and_handles_identical_ones() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--set", "max_steps=300", "--quiet", "--out", s(out)]);
    }
    let single = ok(&["compare", s(&a)]);
    let row: Vec<&str> = single.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..3], ["simple_spread", "mapoca", "1"]);
    assert_eq!(row[6], "true");

    // the same seed twice gives identical runs and a zero-width interval
    let twin = ok(&["compare", s(&a), s(&b)]);
    let row: Vec<&str> = twin.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2], "2");
    assert_eq!(row[4], row[5]);
    assert_eq!(row[6], "false");

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(mapoca(&["compare", s(empty.path())]).status.code(), Some(2));
}

#[test]
fn validate_config_prints_resolved_values() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "# dungeon\nenv = dungeon_run\nalgorithm = ppo\nseed = 3\n").unwrap();
    let out = ok(&["validate-config", s(&file)]);
    assert!(out.contains("seed = 3  # user"));
    assert!(out.contains("max_steps = 150000  # default"));
    assert!(out.contains("minibatch = 1024  # default"));
}
