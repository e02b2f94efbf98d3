use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn samoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samoe"))
        .args(args)
        .env_remove("SAMOE_LAB_SEED")
        .output()
        .unwrap()
}

/// The final stdout line, parsed.
fn status(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("status line")).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn missing_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = samoe(&["train", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let s = status(&out);
    assert_eq!(s["kind"], "usage");
    assert_eq!(s["exit_code"], 2);
}

#[test]
fn unknown_subcommand_and_suite_are_usage_errors() {
    assert_eq!(samoe(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(samoe(&["verify", "nonsense"]).status.code(), Some(2));
    assert_eq!(samoe(&["verify", "99"]).status.code(), Some(2));
    assert_eq!(samoe(&["--help"]).status.code(), Some(0));
}

#[test]
fn step_two_without_a_step_one_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(
        samoe(&["gen-scenes", "--count", "4", "--out", d]).status.code(),
        Some(0)
    );
    let out = samoe(&["train", "--data", d, "--step", "2", "--steps", "1", "--out", d]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn bad_config_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = samoe(&["--set", "data.count=many", "gen-scenes", "--out", d]);
    assert_eq!(out.status.code(), Some(2));
    let out = samoe(&["--set", "no_equals_sign", "gen-scenes", "--out", d]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "seed = 1\nplanner.heads = 3\n").unwrap();
    let out = samoe(&[
        "--config",
        cfg.to_str().unwrap(),
        "gen-scenes",
        "--count",
        "2",
        "--out",
        d,
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_set_override_and_seed_flag_are_resolved() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(
        &cfg,
        "# small run\nseed = 5\ndata.count = 3\ndata.regime = \"overtake\"\n",
    )
    .unwrap();
    let out = samoe(&[
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "data.count=6",
        "--seed",
        "9",
        "gen-scenes",
        "--out",
        d,
    ]);
    assert_eq!(out.status.code(), Some(0));
    let r = read_json(&dir.path().join("resolved.json"));
    assert_eq!(r["seed"], 9);
    assert_eq!(r["seed_source"], "flag");
    assert_eq!(r["settings"]["data"]["count"], 6);
    assert_eq!(r["settings"]["data"]["regime"], "overtake");
    assert_eq!(r["settings"]["planner"]["seed"], 9);
    assert!(!r.to_string().contains(d), "resolved.json must not embed paths");
    assert_eq!(status(&out)["summary"]["scenes"], 6);
}

#[test]
fn environment_seed_is_the_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_samoe"))
        .args(["gen-scenes", "--count", "2", "--out", d])
        .env("SAMOE_LAB_SEED", "41")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let r = read_json(&dir.path().join("resolved.json"));
    assert_eq!(r["seed"], 41);
    assert_eq!(r["seed_source"], "env");
}

#[test]
fn pipeline_writes_manifested_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for args in [
        vec!["gen-scenes", "--count", "6", "--seed", "2", "--out", d],
        vec!["train", "--data", d, "--steps", "3", "--out", d],
        vec!["train", "--data", d, "--step", "2", "--steps", "3", "--out", d],
        vec!["sample", "--ckpt", d, "--data", d, "--count", "2", "--out", d],
        vec!["eval", "--ckpt", d, "--data", d, "--out", d],
    ] {
        let out = samoe(&args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(status(&out)["status"], "ok");
    }
    let m = read_json(&dir.path().join("MANIFEST.json"));
    for f in [
        "data/manifest.json",
        "step1.ckpt",
        "step2.ckpt",
        "step1_losses.csv",
        "traj.ndt",
        "report.json",
    ] {
        assert!(m["files"][f]["sha256"].is_string(), "{f} missing from manifest");
    }
    let report = read_json(&dir.path().join("report.json"));
    assert!(samoe_core::eval::report_schema_errors(&report).is_empty());
    let traj = samoe_numerics::io::load::<f64>(dir.path().join("traj.ndt")).unwrap();
    assert_eq!(traj.shape(), &[2, samoe_core::scene::HORIZON, 2]);
}

#[test]
fn verify_theory_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("lab.json");
    let out = samoe(&[
        "verify",
        "theory",
        "--exp",
        "dispersion_identity",
        "--out",
        file.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&file);
    assert_eq!(r["experiments"][0]["name"], "dispersion_identity");
    assert_eq!(r["summary"]["fail"], 0);
    assert!(dir.path().join("MANIFEST.json").is_file());
}

#[test]
fn bench_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = samoe(&[
        "--set",
        "bench.batch=1",
        "--set",
        "bench.seq=64",
        "--set",
        "bench.mechanisms=[\"dense\",\"samoe\"]",
        "bench",
        "--reps",
        "10",
        "--out",
        d,
        "--json",
        "bench.json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("bench.json").is_file());
}
