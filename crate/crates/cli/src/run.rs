//! Run directories: output preparation, layered configuration and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::failure::{CliResult, Context, Failure};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Creates `dir`, refusing a non-empty one unless `force` is set.
pub fn prepare_output(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::usage(format!("{} is not a directory", dir.display())));
        }
        let occupied = fs::read_dir(dir)
            .with(format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Failure::usage(format!(
                "output directory {} is not empty (pass --force to write into it)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).with(format!("creating {}", dir.display()))
}

/// Overlays the JSON object in `path` onto `base`. Keys absent from `base` are rejected.
pub fn layer_config<C: Serialize + DeserializeOwned>(base: C, path: Option<&Path>) -> CliResult<C> {
    let Some(path) = path else {
        return Ok(base);
    };
    let text = fs::read_to_string(path).with(format!("reading config {}", path.display()))?;
    let overlay: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    let mut merged = serde_json::to_value(base).expect("configuration serializes");
    merge(&mut merged, overlay, "")?;
    serde_json::from_value(merged).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}

fn merge(base: &mut Value, overlay: Value, at: &str) -> CliResult<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => merge_objects(b, o, at),
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn merge_objects(base: &mut Map<String, Value>, overlay: Map<String, Value>, at: &str) -> CliResult<()> {
    for (k, v) in overlay {
        let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        match base.get_mut(&k) {
            Some(slot) => merge(slot, v, &path)?,
            None => return Err(Failure::usage(format!("unknown config key `{path}`"))),
        }
    }
    Ok(())
}

/// Wall-clock time, or `SOURCE_DATE_EPOCH` when set so reruns produce identical manifests.
pub fn timestamp() -> CliResult<String> {
    let t = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(s) => {
            let secs: i64 = s
                .trim()
                .parse()
                .map_err(|_| Failure::usage(format!("SOURCE_DATE_EPOCH must be an integer, got `{s}`")))?;
            DateTime::<Utc>::from_timestamp(secs, 0)
                .ok_or_else(|| Failure::usage(format!("SOURCE_DATE_EPOCH {secs} is out of range")))?
        }
        Err(_) => Utc::now(),
    };
    Ok(t.to_rfc3339_opts(SecondsFormat::Secs, true))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Map<String, Value>,
    /// Files written by the command, relative to the run directory.
    pub artifacts: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

/// Collects what a command read and wrote, then writes `run_manifest.json` last.
pub struct Run {
    dir: PathBuf,
    command: &'static str,
    started_at: String,
    inputs: Map<String, Value>,
    artifacts: Vec<String>,
}

impl Run {
    pub fn start(command: &'static str, dir: &Path) -> CliResult<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            started_at: timestamp()?,
            inputs: Map::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs
            .insert(name.into(), Value::String(path.display().to_string()));
    }

    pub fn inputs(&mut self, name: &str, paths: &[PathBuf]) {
        let list = paths.iter().map(|p| Value::String(p.display().to_string())).collect();
        self.inputs.insert(name.into(), Value::Array(list));
    }

    /// Writes `contents` to `name` inside the run directory.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with(format!("writing {}", path.display()))?;
        self.artifacts.push(name.into());
        Ok(())
    }

    /// Records files another routine already wrote.
    pub fn record(&mut self, names: impl IntoIterator<Item = String>) {
        self.artifacts.extend(names);
    }

    pub fn finish(mut self, config: &impl Serialize, seed: Option<u64>) -> CliResult<()> {
        self.artifacts.sort();
        self.artifacts.dedup();
        let manifest = RunManifest {
            command: self.command.into(),
            version: VERSION.into(),
            seed,
            config: serde_json::to_value(config).expect("configuration serializes"),
            inputs: self.inputs,
            artifacts: self.artifacts,
            started_at: self.started_at,
            finished_at: timestamp()?,
        };
        let path = self.dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, json).with(format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Inner {
        a: u32,
        b: Option<f64>,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Outer {
        x: u32,
        inner: Inner,
    }

    fn base() -> Outer {
        Outer {
            x: 1,
            inner: Inner { a: 2, b: None },
        }
    }

    fn layered(json: &str) -> CliResult<Outer> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, json).unwrap();
        layer_config(base(), Some(&path))
    }

    #[test]
    fn partial_overlay_keeps_other_fields() {
        let out = layered(r#"{"inner": {"b": 0.5}}"#).unwrap();
        assert_eq!(
            out,
            Outer {
                x: 1,
                inner: Inner { a: 2, b: Some(0.5) }
            }
        );
        assert_eq!(layer_config(base(), None).unwrap(), base());
    }

    #[test]
    fn unknown_or_mistyped_keys_are_usage_errors() {
        assert_eq!(
            layered(r#"{"inner": {"c": 1}}"#).unwrap_err().code,
            crate::failure::EXIT_USAGE
        );
        assert_eq!(layered(r#"{"x": "one"}"#).unwrap_err().code, crate::failure::EXIT_USAGE);
        assert_eq!(layered("{").unwrap_err().code, crate::failure::EXIT_USAGE);
    }

    #[test]
    fn non_empty_output_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        prepare_output(&dir.path().join("new"), false).unwrap();
        fs::write(dir.path().join("new/f"), "x").unwrap();
        assert_eq!(prepare_output(&dir.path().join("new"), false).unwrap_err().code, 2);
        prepare_output(&dir.path().join("new"), true).unwrap();
    }
}
