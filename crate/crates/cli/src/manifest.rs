// One JSON object per command run, appended to `manifests.jsonl` in the
// output directory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifests.jsonl";

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub struct Manifest {
    command: String,
    fields: Map<String, Value>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    phases: Map<String, Value>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            fields: Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            phases: Map::new(),
        }
    }

    pub fn field(&mut self, key: &str, value: impl Into<Value>) {
        self.fields.insert(key.to_string(), value.into());
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn phase(&mut self, name: &str, seconds: f64) {
        self.phases.insert(name.to_string(), json!(seconds));
    }

    fn checksums(paths: &[PathBuf]) -> Result<Map<String, Value>, CliError> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), Value::String(sha256_file(p)?))))
            .collect()
    }

    pub fn write(
        self,
        out_dir: &Path,
        config: BTreeMap<String, String>,
        seconds: f64,
    ) -> Result<(), CliError> {
        let mut record = self.fields;
        record.insert("command".into(), json!(self.command));
        record.insert("config".into(), json!(config));
        record.insert("inputs".into(), Value::Object(Self::checksums(&self.inputs)?));
        record.insert("outputs".into(), Value::Object(Self::checksums(&self.outputs)?));
        record.insert("phase_seconds".into(), Value::Object(self.phases));
        record.insert("seconds".into(), json!(seconds));
        let path = out_dir.join(MANIFEST_FILE);
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
        writeln!(file, "{}", Value::Object(record))
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

/// Parses every line of a manifest log.
pub fn read_all(path: &Path) -> Result<Vec<Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Runtime(format!("{}:{}: bad manifest line: {e}", path.display(), i + 1)))
        })
        .collect()
}
