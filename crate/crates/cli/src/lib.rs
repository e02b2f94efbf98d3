//! The `samoe` command line.
//!
//! Every subcommand writes only under its output directory, echoes the
//! resolved configuration as `resolved.json` and records its artifacts in
//! `MANIFEST.json`. A one-line JSON status object goes to stdout; progress
//! and warnings go to stderr.

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use samoe_core::bench::{self, Mechanism};
use samoe_core::dataset::{dataset_read, dataset_write, Dataset, RegimeMix};
use samoe_core::eval;
use samoe_core::planner::Precision;
use samoe_core::theory::{self, ExperimentReport, Status, EXPERIMENTS};
use samoe_core::train::{self, Checkpoint, TrainRun};
use samoe_core::verify;
use samoe_core::CoreError;
use samoe_numerics::io as ndt;
use samoe_numerics::{DType, Scalar, Tensor};

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Where a dataset lives inside a `gen-scenes` output directory.
pub const DATA_SUBDIR: &str = "data";
pub const RESOLVED_FILE: &str = "resolved.json";

#[derive(Debug, Parser)]
#[command(
    name = "samoe",
    version,
    about = "Scene-adaptive expert planner: data, training, evaluation, checks and benchmarks"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `section.key = value` config file (or a JSON object).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed; falls back to the config, then to SAMOE_LAB_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data generation, sampling and evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and rasterize synthetic scenes into OUT/data.
    GenScenes {
        #[arg(long)]
        count: Option<usize>,
        /// `mixed` or one of intersection, narrow_turn, overtake, nominal.
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dense planner (step 1) or the expert planner (step 2).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        step: u8,
        /// Step-1 checkpoint for step 2; defaults to OUT/step1.ckpt.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample trajectories for dataset scenes into OUT/traj.ndt.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Euler steps; defaults to the checkpoint's setting.
        #[arg(long)]
        steps: Option<usize>,
        /// Only the first N scenes.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score sampled trajectories against the dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report file, relative to OUT when given.
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run verification checks: a module suite, `theory`, `all`, or a criterion number.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
        /// Experiment name or `all` (theory suite only).
        #[arg(long)]
        exp: Option<String>,
        /// Report file (`*.json`) or directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic FLOPs and measured latency of the expert-layer mechanisms.
    Bench {
        /// CSV file (`*.csv`) or directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON report, relative to the output directory.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
    },
}

/// A failed run and its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
    Verification { message: String, failures: Vec<Value> },
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
            Failure::Verification { .. } => EXIT_VERIFY,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) | Failure::Verification { message: m, .. } => m,
        }
    }

    pub fn to_json(&self) -> Value {
        let kind = match self {
            Failure::Usage(_) => "usage",
            Failure::Runtime(_) => "runtime",
            Failure::Verification { .. } => "verification",
        };
        let mut v = json!({"status": "error", "kind": kind, "exit_code": self.code(), "message": self.message()});
        if let Failure::Verification { failures, .. } = self {
            v["failures"] = Value::Array(failures.clone());
        }
        v
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => Failure::Usage(format!("config error: {m}")),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<samoe_numerics::NumericsError> for Failure {
    fn from(e: samoe_numerics::NumericsError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Res<T> = std::result::Result<T, Failure>;

/// A finished command.
#[derive(Debug)]
pub struct Done {
    pub command: &'static str,
    pub out: Option<PathBuf>,
    /// Files written, relative to `out`.
    pub artifacts: Vec<String>,
    pub summary: Value,
}

impl Done {
    pub fn to_json(&self) -> Value {
        json!({
            "status": "ok",
            "command": self.command,
            "out": self.out.as_ref().map(|p| p.display().to_string()),
            "artifacts": self.artifacts,
            "summary": self.summary,
        })
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != EXIT_OK {
                println!("{}", Failure::Usage(e.kind().to_string()).to_json());
                return EXIT_USAGE;
            }
            return EXIT_OK;
        }
    };
    match execute(&cli) {
        Ok(done) => {
            println!("{}", done.to_json());
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            println!("{}", f.to_json());
            f.code()
        }
    }
}

pub fn load_config(common: &Common) -> Res<RunConfig> {
    let usage = |e: config::ConfigError| Failure::Usage(e.0);
    let entries = match &common.config {
        Some(p) => config::parse_file(p).map_err(usage)?,
        None => Vec::new(),
    };
    let sets = common
        .set
        .iter()
        .map(|s| config::parse_set(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(usage)?;
    let env = std::env::var(config::SEED_ENV).ok();
    let rc = config::resolve(&entries, &sets, common.seed, common.threads, env).map_err(usage)?;
    for w in &rc.warnings {
        eprintln!("warning: {w}");
    }
    Ok(rc)
}

pub fn execute(cli: &Cli) -> Res<Done> {
    let mut rc = load_config(&cli.common)?;
    rc.settings.planner.validate()?;
    match &cli.command {
        Command::GenScenes { count, regime, out } => gen_scenes(&mut rc, *count, regime.clone(), out),
        Command::Train {
            data,
            step,
            from,
            steps,
            out,
        } => train_cmd(&mut rc, data, *step, from.as_deref(), *steps, out),
        Command::Sample {
            ckpt,
            data,
            steps,
            count,
            out,
        } => sample(&rc, ckpt, data, *steps, *count, out),
        Command::Eval {
            ckpt,
            data,
            report,
            out,
        } => eval_cmd(&rc, ckpt, data, report, out.as_deref()),
        Command::Verify { suite, exp, out } => verify_cmd(&rc, suite, exp.as_deref(), out.as_deref()),
        Command::Bench { out, json, reps } => bench_cmd(&mut rc, out.as_deref(), json.as_deref(), *reps),
    }
}

// ---------------------------------------------------------------------------
// helpers

fn prepare_dir(dir: &Path) -> Res<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Res<String> {
    fs::write(dir.join(name), text).map_err(|e| Failure::Runtime(format!("cannot write {name}: {e}")))?;
    Ok(name.to_string())
}

fn write_json(dir: &Path, name: &str, v: &impl serde::Serialize) -> Res<String> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    write_text(dir, name, &text)
}

/// Writes `resolved.json` and extends the manifest with `artifacts`.
fn finish(command: &'static str, rc: &RunConfig, dir: &Path, mut artifacts: Vec<String>, summary: Value) -> Res<Done> {
    let resolved = json!({
        "command": command,
        "seed": rc.settings.seed,
        "seed_source": rc.seed_source,
        "settings": rc.settings,
        "applied": rc.applied,
        "warnings": rc.warnings,
    });
    artifacts.push(write_json(dir, RESOLVED_FILE, &resolved)?);
    let paths: Vec<PathBuf> = artifacts.iter().map(PathBuf::from).collect();
    manifest::update(dir, &paths)?;
    artifacts.push(manifest::MANIFEST_FILE.to_string());
    Ok(Done {
        command,
        out: Some(dir.to_path_buf()),
        artifacts,
        summary,
    })
}

/// A dataset directory, or a `gen-scenes` output holding one.
pub fn resolve_data_dir(p: &Path) -> Res<PathBuf> {
    for cand in [p.to_path_buf(), p.join(DATA_SUBDIR)] {
        if cand.join("manifest.json").is_file() {
            return Ok(cand);
        }
    }
    Err(Failure::Runtime(format!(
        "no dataset (manifest.json) under {}",
        p.display()
    )))
}

/// A checkpoint file, or a training directory (latest step wins).
pub fn resolve_ckpt(p: &Path) -> Res<PathBuf> {
    if p.is_file() {
        return Ok(p.to_path_buf());
    }
    for name in ["step2.ckpt", "step1.ckpt"] {
        if p.join(name).is_file() {
            return Ok(p.join(name));
        }
    }
    Err(Failure::Runtime(format!("no checkpoint at {}", p.display())))
}

fn load_data(p: &Path) -> Res<Dataset> {
    let dir = resolve_data_dir(p)?;
    Ok(dataset_read(dir)?)
}

fn dtype_of(p: Precision) -> DType {
    match p {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    }
}

/// Runs `$body` with `$t` bound to the scalar type of `$dtype`.
macro_rules! with_dtype {
    ($dtype:expr, $t:ident, $body:block) => {
        match $dtype {
            DType::F32 => {
                type $t = f32;
                $body
            }
            DType::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}

fn tag_counts(ds: &Dataset) -> Value {
    let mut m = serde_json::Map::new();
    for t in samoe_core::scene::Tag::ALL {
        m.insert(
            t.name().into(),
            json!(ds.entries.iter().filter(|e| e.tags.contains(&t)).count()),
        );
    }
    Value::Object(m)
}

// ---------------------------------------------------------------------------
// commands

fn gen_scenes(rc: &mut RunConfig, count: Option<usize>, regime: Option<String>, out: &Path) -> Res<Done> {
    let s = &mut rc.settings;
    if let Some(c) = count {
        s.data.count = c;
    }
    if let Some(r) = regime {
        s.data.regime = r;
    }
    if s.data.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let mix: RegimeMix = s.data.regime.parse().map_err(|e: CoreError| {
        Failure::Usage(format!(
            "{e}; expected mixed, intersection, narrow_turn, overtake or nominal"
        ))
    })?;
    let dir = prepare_dir(out)?;
    eprintln!(
        "generating {} scenes ({}) with seed {}",
        s.data.count, s.data.regime, s.seed
    );
    let ds = Dataset::generate_threads(s.data.count, mix, s.seed, &s.planner.bev, s.threads)?;
    dataset_write(&ds, dir.join(DATA_SUBDIR))?;
    let summary = json!({"scenes": ds.len(), "regime": s.data.regime, "tags": tag_counts(&ds), "data": DATA_SUBDIR});
    finish("gen-scenes", rc, &dir, vec![DATA_SUBDIR.into()], summary)
}

fn losses_csv(losses: &[f64], first_step: u64) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", first_step + i as u64));
    }
    s
}

fn save_run<T: Scalar>(
    run: &TrainRun<T>,
    step: u8,
    first_step: u64,
    window: usize,
    dir: &Path,
) -> Res<(Vec<String>, Value)> {
    let ckpt_name = format!("step{step}.ckpt");
    run.checkpoint.save(dir.join(&ckpt_name))?;
    let mut artifacts = vec![ckpt_name];
    artifacts.push(write_text(
        dir,
        &format!("step{step}_losses.csv"),
        &losses_csv(&run.losses, first_step),
    )?);
    let summary = json!({
        "step": step,
        "stage": run.checkpoint.planner.stage,
        "dtype": T::DTYPE.name(),
        "steps_run": run.losses.len(),
        "optimizer_step": run.checkpoint.step,
        "params": run.checkpoint.planner.params.numel(),
        "first_loss": run.losses.first(),
        "last_loss": run.losses.last(),
        "smooth_window": window,
        "smoothed_drop": train::smoothed_drop(&run.losses, window),
        "aborted_at": run.aborted_at,
    });
    artifacts.push(write_json(dir, &format!("step{step}.json"), &summary)?);
    Ok((artifacts, summary))
}

fn train_cmd(
    rc: &mut RunConfig,
    data: &Path,
    step: u8,
    from: Option<&Path>,
    steps: Option<usize>,
    out: &Path,
) -> Res<Done> {
    if let Some(n) = steps {
        rc.settings.train.steps = n;
    }
    if step == 1 && from.is_some() {
        return Err(Failure::Usage("--from only applies to --step 2".into()));
    }
    let s = rc.settings.clone();
    let ds = load_data(data)?;
    if ds.bev != s.planner.bev {
        return Err(Failure::Usage(format!(
            "dataset grid {:?} does not match planner.bev {:?}",
            ds.bev, s.planner.bev
        )));
    }
    let dir = prepare_dir(out)?;
    let n = s.train.steps;
    let window = s.train.smooth_window;
    eprintln!("training step {step}: {n} steps on {} scenes", ds.len());
    let (artifacts, summary, aborted) = if step == 1 {
        with_dtype!(dtype_of(s.planner.precision), T, {
            let run = train::train_step1::<T>(&ds, &s.planner, n)?;
            let (a, sm) = save_run(&run, 1, 0, window, &dir)?;
            (a, sm, run.aborted_at)
        })
    } else {
        let from = match from {
            Some(p) => p.to_path_buf(),
            None => dir.join("step1.ckpt"),
        };
        if !from.is_file() {
            return Err(Failure::Usage(format!(
                "step 2 needs a step-1 checkpoint: {} not found (pass --from)",
                from.display()
            )));
        }
        with_dtype!(train::checkpoint_dtype(&from)?, T, {
            let c1 = Checkpoint::<T>::load(&from)?;
            let mut c2 = train::init_step2(&c1)?;
            let cfg = &mut c2.planner.config;
            cfg.lr = s.planner.lr;
            cfg.momentum = s.planner.momentum;
            cfg.clip = s.planner.clip;
            cfg.batch = s.planner.batch;
            cfg.seed = s.planner.seed;
            let run = train::train(c2, &ds, n)?;
            let (a, sm) = save_run(&run, 2, 0, window, &dir)?;
            (a, sm, run.aborted_at)
        })
    };
    let done = finish("train", rc, &dir, artifacts, summary)?;
    if let Some(at) = aborted {
        return Err(Failure::Runtime(format!(
            "non-finite loss at optimizer step {at}; the last finite state was saved"
        )));
    }
    Ok(done)
}

fn sample(
    rc: &RunConfig,
    ckpt: &Path,
    data: &Path,
    steps: Option<usize>,
    count: Option<usize>,
    out: &Path,
) -> Res<Done> {
    if steps == Some(0) {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    let s = &rc.settings;
    let path = resolve_ckpt(ckpt)?;
    let mut ds = load_data(data)?;
    if let Some(n) = count {
        if n == 0 {
            return Err(Failure::Usage("--count must be at least 1".into()));
        }
        ds = ds.subset(&(0..n.min(ds.len())).collect::<Vec<_>>());
    }
    let dir = prepare_dir(out)?;
    let (trajs, meta) = with_dtype!(train::checkpoint_dtype(&path)?, T, {
        let c = Checkpoint::<T>::load(&path)?;
        let mut planner = c.planner;
        if let Some(n) = steps {
            planner.config.ode_steps = n;
        }
        if ds.bev != planner.config.bev {
            return Err(Failure::Usage("dataset grid does not match the checkpoint".into()));
        }
        let trajs = eval::predict_threads(&planner, &ds, s.seed, s.threads)?;
        let meta = json!({
            "scenes": ds.len(),
            "steps": planner.config.ode_steps,
            "seed": s.seed,
            "stage": planner.stage,
            "checkpoint_dtype": T::DTYPE.name(),
            "checkpoint_step": c.step,
            "file": "traj.ndt",
            "dtype": "f64",
            "shape": [ds.len(), samoe_core::scene::HORIZON, 2],
            "units": "m",
        });
        (trajs, meta)
    });
    let flat: Vec<f64> = trajs
        .iter()
        .flat_map(|t| t.iter().flat_map(|p| p.iter().copied()))
        .collect();
    let t = Tensor::<f64>::new(&[trajs.len(), samoe_core::scene::HORIZON, 2], flat)?;
    ndt::save(dir.join("traj.ndt"), &t)?;
    let artifacts = vec!["traj.ndt".to_string(), write_json(&dir, "traj.json", &meta)?];
    finish("sample", rc, &dir, artifacts, meta)
}

/// Splits an output argument into a directory and a file name: a path with
/// extension `ext` names the file, anything else is the directory.
fn split_out(p: &Path, ext: &str, default_name: &str) -> (PathBuf, String) {
    if p.extension().is_some_and(|e| e == ext) {
        let dir = match p.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        (
            dir,
            p.file_name().expect("has extension").to_string_lossy().into_owned(),
        )
    } else {
        (p.to_path_buf(), default_name.to_string())
    }
}

/// A file path that must stay inside `dir`.
fn inside(dir: &Path, file: &Path) -> Res<String> {
    let rel = if file.is_absolute() {
        file.strip_prefix(dir)
            .map_err(|_| {
                Failure::Usage(format!(
                    "{} is outside the output directory {}",
                    file.display(),
                    dir.display()
                ))
            })?
            .to_path_buf()
    } else {
        file.to_path_buf()
    };
    if rel.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
        return Err(Failure::Usage(format!(
            "{} must be a plain relative path",
            file.display()
        )));
    }
    Ok(rel.to_string_lossy().into_owned())
}

fn eval_cmd(rc: &RunConfig, ckpt: &Path, data: &Path, report: &Path, out: Option<&Path>) -> Res<Done> {
    let s = &rc.settings;
    let (dir, name) = match out {
        Some(d) => (d.to_path_buf(), inside(d, report)?),
        None => split_out(report, "json", "report.json"),
    };
    let path = resolve_ckpt(ckpt)?;
    let ds = load_data(data)?;
    let dir = prepare_dir(&dir)?;
    let rep = with_dtype!(train::checkpoint_dtype(&path)?, T, {
        let c = Checkpoint::<T>::load(&path)?;
        if ds.bev != c.planner.config.bev {
            return Err(Failure::Usage("dataset grid does not match the checkpoint".into()));
        }
        let preds = eval::predict_threads(&c.planner, &ds, s.seed, s.threads)?;
        eval::evaluate_predictions(&ds, &preds)?
    });
    let v = serde_json::to_value(&rep)?;
    if let Some(parent) = Path::new(&name).parent() {
        fs::create_dir_all(dir.join(parent))?;
    }
    let artifacts = vec![write_json(&dir, &name, &v)?];
    let errs = eval::report_schema_errors(&v);
    let summary = json!({
        "scenes": rep.overall.count,
        "l2_avg": rep.overall.l2_avg,
        "collision_avg": rep.overall.collision_avg,
        "success_rate": rep.overall.success_rate,
        "report": name,
    });
    let done = finish("eval", rc, &dir, artifacts, summary)?;
    if !errs.is_empty() {
        return Err(Failure::Verification {
            message: "evaluation report does not match its schema".into(),
            failures: errs.into_iter().map(Value::String).collect(),
        });
    }
    Ok(done)
}

fn status_counts<'a>(statuses: impl Iterator<Item = &'a Status>) -> Value {
    let (mut p, mut f, mut i) = (0, 0, 0);
    for s in statuses {
        match s {
            Status::Pass => p += 1,
            Status::Fail => f += 1,
            Status::Inconclusive => i += 1,
        }
    }
    json!({"pass": p, "fail": f, "inconclusive": i})
}

fn print_experiment(r: &ExperimentReport) {
    let label = match r.status {
        Status::Pass => "pass",
        Status::Fail => "FAIL",
        Status::Inconclusive => "inconclusive",
    };
    let keys: Vec<String> = r.measured.iter().take(4).map(|(k, v)| format!("{k}={v:.4e}")).collect();
    eprintln!("[{label:>12}] {:<24} {}", r.name, keys.join(" "));
}

fn run_theory(names: &[&str], seed: u64, opts: &theory::LabOptions) -> Res<Vec<ExperimentReport>> {
    let needs_planner = names
        .iter()
        .any(|n| matches!(*n, "bilipschitz_probe" | "trajectory_divergence" | "gradient_stability"));
    let lab = if needs_planner {
        Some(theory::lab_planner(seed)?)
    } else {
        None
    };
    let mut out = Vec::new();
    for n in names {
        let r = theory::run(n, seed, opts, lab.as_ref())?;
        print_experiment(&r);
        out.push(r);
    }
    Ok(out)
}

fn verify_cmd(rc: &RunConfig, suite: &str, exp: Option<&str>, out: Option<&Path>) -> Res<Done> {
    let s = &rc.settings;
    let seed = s.seed;
    let mut checks = Vec::new();
    let mut experiments = Vec::new();
    if suite == "theory" {
        let names: Vec<&str> = match exp {
            None | Some("all") => EXPERIMENTS.to_vec(),
            Some(n) if EXPERIMENTS.contains(&n) => vec![n],
            Some(n) => {
                return Err(Failure::Usage(format!(
                    "unknown experiment {n:?}; expected all or one of {}",
                    EXPERIMENTS.join(", ")
                )))
            }
        };
        experiments = run_theory(&names, seed, &s.lab)?;
    } else {
        if exp.is_some() {
            return Err(Failure::Usage("--exp applies to `verify theory` only".into()));
        }
        let ids = match suite.parse::<u32>() {
            Ok(id) if verify::criterion_name(id).is_some() => vec![id],
            Ok(id) => return Err(Failure::Usage(format!("no criterion {id}"))),
            Err(_) => verify::suite(suite).ok_or_else(|| {
                let names: Vec<&str> = verify::SUITES.iter().map(|s| s.0).collect();
                Failure::Usage(format!(
                    "unknown suite {suite:?}; expected all, theory, a criterion number or one of {}",
                    names.join(", ")
                ))
            })?,
        };
        for id in ids {
            let c = verify::run(id, seed)?;
            eprintln!("{}", c.line());
            checks.push(c);
        }
        if suite == "all" {
            experiments = run_theory(&EXPERIMENTS, seed, &s.lab)?;
        }
    }
    let statuses = checks
        .iter()
        .map(|c| &c.status)
        .chain(experiments.iter().map(|e| &e.status));
    let counts = status_counts(statuses);
    let report = json!({
        "suite": suite,
        "seed": seed,
        "summary": counts,
        "checks": checks,
        "experiments": experiments,
    });
    let mut failures: Vec<Value> = checks
        .iter()
        .filter(|c| c.status == Status::Fail)
        .map(|c| json!({"criterion": c.id, "name": c.name, "measured": c.measured, "notes": c.notes}))
        .collect();
    failures.extend(
        experiments
            .iter()
            .filter(|e| e.status == Status::Fail)
            .map(|e| json!({"experiment": e.name, "measured": e.measured, "notes": e.notes})),
    );
    let done = match out {
        Some(p) => {
            let (dir, name) = split_out(p, "json", "verify.json");
            let dir = prepare_dir(&dir)?;
            let artifacts = vec![write_json(&dir, &name, &report)?];
            finish("verify", rc, &dir, artifacts, counts.clone())?
        }
        None => Done {
            command: "verify",
            out: None,
            artifacts: Vec::new(),
            summary: counts.clone(),
        },
    };
    if !failures.is_empty() {
        return Err(Failure::Verification {
            message: format!("{} check(s) failed", failures.len()),
            failures,
        });
    }
    Ok(done)
}

fn bench_cmd(rc: &mut RunConfig, out: Option<&Path>, json_path: Option<&Path>, reps: Option<usize>) -> Res<Done> {
    if let Some(r) = reps {
        rc.settings.bench.reps = r;
    }
    let b = rc.settings.bench.clone();
    let mechs = b
        .mechanisms
        .iter()
        .map(|m| Mechanism::parse(m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if mechs.is_empty() {
        return Err(Failure::Usage("bench.mechanisms is empty".into()));
    }
    let (dir, csv_name) = match (out, json_path) {
        (Some(p), _) => {
            let (d, n) = split_out(p, "csv", "bench.csv");
            (Some(d), Some(n))
        }
        (None, Some(j)) if j.is_absolute() => (j.parent().map(Path::to_path_buf), None),
        (None, Some(_)) => (Some(PathBuf::from(".")), None),
        (None, None) => (None, None),
    };
    let json_name = match (&dir, json_path) {
        (Some(d), Some(j)) => Some(inside(d, j)?),
        _ => None,
    };
    if !bench::alloc_tracking() {
        eprintln!("warning: allocation tracking is off; memory columns read 0");
    }
    eprintln!("timing {} mechanisms, {} reps", mechs.len(), b.reps);
    let mut report = bench::latency_bench(&b.cost, &mechs, b.reps, rc.settings.seed)?;
    if b.router {
        report.router = Some(bench::router_bench(&b.cost, b.reps, rc.settings.seed)?);
    }
    let csv = report.to_csv();
    eprint!("{csv}");
    let mut summary = json!({
        "tokens": b.cost.tokens(),
        "rows": report.rows.iter().map(|r| json!({"mechanism": r.mechanism.name(), "median_ms": r.median_ms, "flops_per_token": r.flops_per_token})).collect::<Vec<_>>(),
    });
    if let Some(r) = &report.router {
        summary["router_share"] = json!(r.share);
    }
    match dir {
        Some(d) => {
            let d = prepare_dir(&d)?;
            let mut artifacts = Vec::new();
            if let Some(n) = csv_name {
                artifacts.push(write_text(&d, &n, &csv)?);
            }
            if let Some(n) = json_name {
                artifacts.push(write_json(&d, &n, &report)?);
            }
            finish("bench", rc, &d, artifacts, summary)
        }
        None => Ok(Done {
            command: "bench",
            out: None,
            artifacts: Vec::new(),
            summary,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_splitting() {
        assert_eq!(
            split_out(Path::new("r/b.csv"), "csv", "x"),
            (PathBuf::from("r"), "b.csv".into())
        );
        assert_eq!(
            split_out(Path::new("b.csv"), "csv", "x"),
            (PathBuf::from("."), "b.csv".into())
        );
        assert_eq!(
            split_out(Path::new("r"), "csv", "x.csv"),
            (PathBuf::from("r"), "x.csv".into())
        );
    }

    #[test]
    fn files_must_stay_inside_the_output() {
        assert_eq!(inside(Path::new("/o"), Path::new("a/r.json")).unwrap(), "a/r.json");
        assert_eq!(inside(Path::new("/o"), Path::new("/o/r.json")).unwrap(), "r.json");
        assert!(inside(Path::new("/o"), Path::new("/p/r.json")).is_err());
        assert!(inside(Path::new("/o"), Path::new("../r.json")).is_err());
    }

    #[test]
    fn failure_json_carries_exit_code() {
        let f = Failure::Verification {
            message: "x".into(),
            failures: vec![json!(1)],
        };
        let v = f.to_json();
        assert_eq!(v["exit_code"], 3);
        assert_eq!(v["kind"], "verification");
        assert_eq!(Failure::Usage("u".into()).code(), EXIT_USAGE);
        assert_eq!(Failure::from(CoreError::Config("c".into())).code(), EXIT_USAGE);
        assert_eq!(Failure::from(CoreError::Dataset("d".into())).code(), EXIT_RUNTIME);
    }
}
