//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! The training criterion additionally drives the `samoe` binary through
//! gen-scenes, train and eval twice and compares the two manifests.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use samoe_core::verify::{self, Status};

const SEED: u64 = 7;

fn samoe(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_samoe"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stdout).trim()));
    }
    Ok(())
}

fn pipeline(dir: &Path) -> Result<String, String> {
    let d = dir.to_str().ok_or("non-utf8 temp dir")?;
    let seed = SEED.to_string();
    samoe(&["gen-scenes", "--count", "24", "--seed", &seed, "--out", d])?;
    samoe(&["train", "--data", d, "--steps", "20", "--seed", &seed, "--out", d])?;
    samoe(&["eval", "--ckpt", d, "--data", d, "--seed", &seed, "--out", d])?;
    std::fs::read_to_string(dir.join("MANIFEST.json")).map_err(|e| e.to_string())
}

/// Two CLI runs with the same seed must produce byte-identical artifacts.
fn cli_rerun() -> Result<bool, String> {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    Ok(pipeline(a.path())? == pipeline(b.path())?)
}

fn main() {
    let mut failed = 0;
    for id in 1..=13 {
        let line = match verify::run(id, SEED) {
            Ok(mut c) => {
                if id == 12 {
                    let t = Instant::now();
                    match cli_rerun() {
                        Ok(same) => {
                            c.measured
                                .insert("cli_manifest_identical".into(), if same { 1.0 } else { 0.0 });
                            if !same {
                                c.status = Status::Fail;
                                c.notes.push("CLI reruns produced different manifests".into());
                            }
                        }
                        Err(e) => {
                            c.status = Status::Fail;
                            c.notes.push(format!("CLI pipeline failed: {e}"));
                        }
                    }
                    c.seconds += t.elapsed().as_secs_f64();
                }
                if c.passed() {
                    c.line()
                } else {
                    failed += 1;
                    format!("{} {}", c.line(), c.notes.join("; "))
                }
            }
            Err(e) => {
                failed += 1;
                format!(
                    "[{:>12}] {id:>2} {:<20} error: {e}",
                    "FAIL",
                    verify::criterion_name(id).unwrap_or("?")
                )
            }
        };
        println!("{line}");
    }
    println!("acceptance: {} of 13 criteria passed", 13 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
