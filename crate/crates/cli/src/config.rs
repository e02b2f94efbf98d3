//! Run configuration: flat `section.key = value` files, `--set` overrides
//! and seed resolution.
//!
//! Values are typed on read: `true`/`false`, integers, floats, `[..]` JSON
//! arrays, quoted or bare strings. A file whose first non-blank character
//! is `{` is read as a JSON object and flattened to the same dotted keys.

use std::fmt;
use std::path::Path;

use samoe_core::bench::CostConfig;
use samoe_core::planner::PlannerConfig;
use samoe_core::theory::LabOptions;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable consulted when no seed is given.
pub const SEED_ENV: &str = "SAMOE_LAB_SEED";

#[derive(Clone, Debug, PartialEq)]
pub enum Origin {
    File { path: String, line: usize },
    Set,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{path}:{line}"),
            Origin::Set => f.write_str("--set"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: Value,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Types a raw value.
pub fn parse_value(raw: &str) -> Result<Value, String> {
    let t = raw.trim();
    if t.is_empty() {
        return Err("empty value".into());
    }
    if t.len() >= 2 && t.starts_with('"') && t.ends_with('"') {
        return serde_json::from_str::<String>(t)
            .map(Value::String)
            .map_err(|e| format!("bad quoted string: {e}"));
    }
    if t.starts_with('[') {
        return serde_json::from_str(t).map_err(|e| format!("bad array: {e}"));
    }
    match t {
        "true" => return Ok(Value::Bool(true)),
        "false" => return Ok(Value::Bool(false)),
        _ => {}
    }
    if let Ok(i) = t.parse::<i64>() {
        return Ok(Value::from(i));
    }
    if let Ok(u) = t.parse::<u64>() {
        return Ok(Value::from(u));
    }
    if let Ok(x) = t.parse::<f64>() {
        if !x.is_finite() {
            return Err(format!("non-finite number {t}"));
        }
        return Ok(Value::from(x));
    }
    Ok(Value::String(t.to_string()))
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.split('.').all(|part| !part.is_empty())
        && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn flatten_json(prefix: &str, v: &Value, source: &str, out: &mut Vec<Entry>) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_json(&key, x, source, out);
            }
        }
        _ => out.push(Entry {
            key: prefix.to_string(),
            value: v.clone(),
            origin: Origin::File {
                path: source.to_string(),
                line: 0,
            },
        }),
    }
}

/// Parses config text. `source` names the file in error messages.
pub fn parse_text(text: &str, source: &str) -> Result<Vec<Entry>, ConfigError> {
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(text)
            .map_err(|e| ConfigError(format!("{source}:{}: malformed JSON config: {e}", e.line())))?;
        let mut out = Vec::new();
        flatten_json("", &v, source, &mut out);
        return Ok(out);
    }
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |msg: String| ConfigError(format!("{source}:{line}: {msg}"));
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found {t:?}")))?;
        let key = k.trim();
        if !valid_key(key) {
            return Err(err(format!("invalid key {key:?}")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(err(format!("duplicate key `{key}` (first set at {})", prev.origin)));
        }
        let value = parse_value(v).map_err(|m| err(format!("`{key}`: {m}")))?;
        out.push(Entry {
            key: key.to_string(),
            value,
            origin: Origin::File {
                path: source.to_string(),
                line,
            },
        });
    }
    Ok(out)
}

pub fn parse_file(path: &Path) -> Result<Vec<Entry>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    parse_text(&text, &path.display().to_string())
}

/// One `--set key=value` argument.
pub fn parse_set(arg: &str) -> Result<Entry, ConfigError> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("--set expects key=value, found {arg:?}")))?;
    let key = k.trim();
    if !valid_key(key) {
        return Err(ConfigError(format!("--set: invalid key {key:?}")));
    }
    let value = parse_value(v).map_err(|m| ConfigError(format!("--set {key}: {m}")))?;
    Ok(Entry {
        key: key.to_string(),
        value,
        origin: Origin::Set,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSettings {
    pub count: usize,
    /// `mixed` or a regime name.
    pub regime: String,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            count: 256,
            regime: "mixed".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub steps: usize,
    /// Moving-average window of the reported loss drop.
    pub smooth_window: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 500,
            smooth_window: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    #[serde(flatten)]
    pub cost: CostConfig,
    pub reps: usize,
    pub mechanisms: Vec<String>,
    /// Also time the scene encoder against the expert-layer stack.
    pub router: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            cost: CostConfig::default(),
            reps: 20,
            mechanisms: ["dense", "sparse", "soft", "samoe"].map(String::from).to_vec(),
            router: true,
        }
    }
}

/// Everything a subcommand may read.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub seed: u64,
    pub threads: usize,
    pub planner: PlannerConfig,
    pub data: DataSettings,
    pub train: TrainSettings,
    pub bench: BenchSettings,
    pub lab: LabOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Config,
    Env,
    Default,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub settings: Settings,
    pub seed_source: SeedSource,
    /// Every applied entry as `key = value`, in order.
    pub applied: Vec<String>,
    pub warnings: Vec<String>,
}

/// Sets `path` in `root` if every segment already exists.
fn set_path(root: &mut Value, path: &str, value: Value) -> bool {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let Some(obj) = cur.as_object_mut() else {
            return false;
        };
        if !obj.contains_key(*p) {
            return false;
        }
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return true;
        }
        cur = obj.get_mut(*p).expect("checked");
    }
    false
}

/// Applies file entries, then overrides, then the seed and thread flags.
pub fn resolve(
    entries: &[Entry],
    overrides: &[Entry],
    seed_flag: Option<u64>,
    threads_flag: Option<usize>,
    env_seed: Option<String>,
) -> Result<RunConfig, ConfigError> {
    let mut root = serde_json::to_value(Settings::default()).expect("settings serialize");
    let mut applied = Vec::new();
    let mut warnings = Vec::new();
    let mut seed_set = false;
    for e in entries.iter().chain(overrides) {
        if e.key == "planner.seed" {
            warnings.push(format!(
                "{}: `planner.seed` is ignored; the planner uses `seed`",
                e.origin
            ));
            continue;
        }
        let mut trial = root.clone();
        if !set_path(&mut trial, &e.key, e.value.clone()) {
            warnings.push(format!("{}: unknown key `{}` ignored", e.origin, e.key));
            continue;
        }
        serde_json::from_value::<Settings>(trial.clone())
            .map_err(|err| ConfigError(format!("{}: `{}` = {}: {err}", e.origin, e.key, e.value)))?;
        root = trial;
        seed_set |= e.key == "seed";
        applied.push(format!("{} = {}", e.key, e.value));
    }
    let mut settings: Settings = serde_json::from_value(root).expect("validated above");
    let seed_source = if let Some(s) = seed_flag {
        settings.seed = s;
        SeedSource::Flag
    } else if seed_set {
        SeedSource::Config
    } else if let Some(raw) = env_seed {
        settings.seed = raw
            .trim()
            .parse()
            .map_err(|_| ConfigError(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        SeedSource::Env
    } else {
        SeedSource::Default
    };
    if let Some(t) = threads_flag {
        settings.threads = t;
    }
    settings.threads = settings.threads.max(1);
    settings.planner.seed = settings.seed;
    Ok(RunConfig {
        settings,
        seed_source,
        applied,
        warnings,
    })
}

impl Default for RunConfig {
    fn default() -> Self {
        resolve(&[], &[], None, None, None).expect("defaults resolve")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typed_values() {
        assert_eq!(parse_value("8").unwrap(), Value::from(8));
        assert_eq!(parse_value(" 1e-4 ").unwrap(), Value::from(1e-4));
        assert_eq!(parse_value("true").unwrap(), Value::Bool(true));
        assert_eq!(parse_value("f64").unwrap(), Value::from("f64"));
        assert_eq!(parse_value("\"a b\"").unwrap(), Value::from("a b"));
        assert_eq!(parse_value("[16, 16]").unwrap(), serde_json::json!([16, 16]));
        assert!(parse_value("").is_err());
        assert!(parse_value("inf").is_err());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = "# comment\nplanner.layers = 4\n\nthis line is wrong\n";
        let err = parse_text(text, "cfg.txt").unwrap_err();
        assert!(err.0.starts_with("cfg.txt:4:"), "{}", err.0);
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = parse_text("seed = 1\nseed = 2\n", "c").unwrap_err();
        assert!(err.0.contains("c:2:") && err.0.contains("c:1"), "{}", err.0);
    }

    #[test]
    fn set_overrides_file_value() {
        let file = parse_text("planner.layers = 4\n", "c").unwrap();
        let set = vec![parse_set("planner.layers=8").unwrap()];
        let rc = resolve(&file, &set, None, None, None).unwrap();
        assert_eq!(rc.settings.planner.layers, 8);
        assert_eq!(rc.applied, vec!["planner.layers = 4", "planner.layers = 8"]);
    }

    #[test]
    fn nested_and_flattened_keys() {
        let file = parse_text(
            "planner.bev.height = 16\nbench.d = 64\nbench.reps = 12\nlab.ordering_seeds = 5\n",
            "c",
        )
        .unwrap();
        let rc = resolve(&file, &[], None, None, None).unwrap();
        assert_eq!(rc.settings.planner.bev.height, 16);
        assert_eq!(rc.settings.bench.cost.d, 64);
        assert_eq!(rc.settings.bench.reps, 12);
        assert_eq!(rc.settings.lab.ordering_seeds, 5);
    }

    #[test]
    fn json_config_is_flattened() {
        let file = parse_text("{\"planner\": {\"d\": 32}, \"seed\": 3}", "c.json").unwrap();
        let rc = resolve(&file, &[], None, None, None).unwrap();
        assert_eq!((rc.settings.planner.d, rc.settings.seed), (32, 3));
    }

    #[test]
    fn unknown_keys_warn_and_bad_types_fail() {
        let file = parse_text("planner.nope = 1\n", "c").unwrap();
        let rc = resolve(&file, &[], None, None, None).unwrap();
        assert_eq!(rc.warnings.len(), 1);
        assert!(rc.warnings[0].contains("planner.nope"));

        let file = parse_text("\n\nplanner.layers = 2.5\n", "c").unwrap();
        let err = resolve(&file, &[], None, None, None).unwrap_err();
        assert!(err.0.starts_with("c:3:"), "{}", err.0);
    }

    #[test]
    fn seed_precedence() {
        let file = parse_text("seed = 5\n", "c").unwrap();
        let env = Some("9".to_string());
        let rc = resolve(&file, &[], Some(1), None, env.clone()).unwrap();
        assert_eq!((rc.settings.seed, rc.seed_source), (1, SeedSource::Flag));
        let rc = resolve(&file, &[], None, None, env.clone()).unwrap();
        assert_eq!((rc.settings.seed, rc.seed_source), (5, SeedSource::Config));
        let rc = resolve(&[], &[], None, None, env).unwrap();
        assert_eq!((rc.settings.seed, rc.seed_source), (9, SeedSource::Env));
        assert_eq!(rc.settings.planner.seed, 9);
        assert!(resolve(&[], &[], None, None, Some("x".into())).is_err());
        let rc = resolve(&[], &[], None, None, None).unwrap();
        assert_eq!((rc.settings.seed, rc.seed_source), (0, SeedSource::Default));
    }

    #[test]
    fn threads_default_to_one() {
        assert_eq!(RunConfig::default().settings.threads, 1);
        let rc = resolve(&[], &[], None, Some(3), None).unwrap();
        assert_eq!(rc.settings.threads, 3);
    }
}
