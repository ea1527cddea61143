//! Output directory handling. Every file written through [`OutputDir`] is
//! listed in `manifest.json` with its SHA-256 and the config hash; JSON
//! files also carry the config hash themselves.
//!
//! Wall-clock fields are moved out of the JSON artifacts into `timing.json`,
//! which is the only unhashed file. Everything else is byte-identical across
//! repeated runs of the same config.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    kind: &'static str,
    sha256: String,
}

pub struct OutputDir {
    root: PathBuf,
    config_hash: String,
    command: &'static str,
    resolved: Value,
    entries: Vec<ManifestEntry>,
    timing: serde_json::Map<String, Value>,
}

const TIMING_KEYS: [&str; 2] = ["wall_time_s", "wall_time"];

/// Removes timing keys from `v` (recursively) and returns them keyed by their
/// JSON pointer.
fn take_timing(v: &mut Value, pointer: &str, out: &mut serde_json::Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for key in TIMING_KEYS {
                if let Some(t) = m.remove(key) {
                    out.insert(format!("{pointer}/{key}"), t);
                }
            }
            for (k, child) in m.iter_mut() {
                take_timing(child, &format!("{pointer}/{k}"), out);
            }
        }
        Value::Array(a) => {
            for (i, child) in a.iter_mut().enumerate() {
                take_timing(child, &format!("{pointer}/{i}"), out);
            }
        }
        _ => {}
    }
}

impl OutputDir {
    pub fn create(root: &Path, cfg: &ExperimentConfig, command: &'static str) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            config_hash: cfg.hash(),
            command,
            // The output location is left out so manifests of identical runs match.
            resolved: {
                let mut v = serde_json::to_value(cfg)?;
                v["output"] = Value::Null;
                v
            },
            entries: Vec::new(),
            timing: serde_json::Map::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, kind: &'static str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.entries.push(ManifestEntry { file: name.to_string(), kind, sha256: hex::encode(Sha256::digest(bytes)) });
        Ok(())
    }

    /// Writes `{"config_hash": ..., <fields of value>}` as pretty JSON, with
    /// timing fields diverted to `timing.json`.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert("config_hash".into(), Value::String(self.config_hash.clone()));
        let mut value = serde_json::to_value(value)?;
        let mut timing = serde_json::Map::new();
        take_timing(&mut value, "", &mut timing);
        if !timing.is_empty() {
            self.timing.insert(name.to_string(), Value::Object(timing));
        }
        match value {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("value".into(), other);
            }
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(obj))?;
        text.push('\n');
        self.write_bytes(name, "json", text.as_bytes())
    }

    pub fn write_with<F>(&mut self, name: &str, kind: &'static str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> agmonlab::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write_bytes(name, kind, &buf)
    }

    /// Writes the resolved config and the manifest. Call last.
    pub fn finish(mut self, cfg: &ExperimentConfig) -> Result<()> {
        let mut echoed = cfg.clone();
        echoed.output.dir = Default::default();
        let toml = format!("# config_hash = \"{}\"\n{}", self.config_hash, echoed.to_toml());
        self.write_bytes("resolved_config.toml", "toml", toml.as_bytes())?;
        let mut timing =
            serde_json::to_string_pretty(&json!({ "config_hash": self.config_hash, "timing": self.timing }))?;
        timing.push('\n');
        let timing_path = self.path("timing.json");
        fs::write(&timing_path, timing).with_context(|| format!("cannot write {}", timing_path.display()))?;
        let manifest = json!({
            "config_hash": self.config_hash,
            "command": self.command,
            "files": self.entries,
            "unhashed": ["timing.json"],
            "resolved_config": self.resolved,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.path("manifest.json");
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
