//! Atomic file writes and run stamping.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};
use tempfile::NamedTempFile;

use crate::error::{CliError, CliResult};

/// Identifies the configuration and seed behind an output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunStamp {
    pub config_sha256: String,
    pub seed: u64,
}

impl RunStamp {
    /// Text for a CSV `#` comment line.
    pub fn comment(&self) -> String {
        format!("config_sha256={} seed={}", self.config_sha256, self.seed)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("stamp serializes")
    }

    /// Adds the stamp fields to the JSON object built from `payload`; a
    /// non-object payload goes under `data`.
    pub fn wrap<T: Serialize>(&self, payload: &T) -> CliResult<Value> {
        let mut map = Map::new();
        map.insert("config_sha256".into(), Value::String(self.config_sha256.clone()));
        map.insert("seed".into(), Value::from(self.seed));
        match serde_json::to_value(payload).map_err(|e| CliError::Stage(e.to_string()))? {
            Value::Object(fields) => map.extend(fields),
            other => {
                map.insert("data".into(), other);
            }
        }
        Ok(Value::Object(map))
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent)
        .map_err(|e| CliError::Stage(format!("creating {}: {e}", parent.display())))?;
    let mut tmp = NamedTempFile::new_in(parent)
        .map_err(|e| CliError::Stage(format!("temp file in {}: {e}", parent.display())))?;
    tmp.write_all(bytes)
        .map_err(|e| CliError::Stage(format!("writing {}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| CliError::Stage(format!("renaming into {}: {e}", path.display())))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, stamp: &RunStamp, payload: &T) -> CliResult<()> {
    let v = stamp.wrap(payload)?;
    let mut bytes = serde_json::to_vec_pretty(&v).map_err(|e| CliError::Stage(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Runs a CSV writer into memory, then writes the result atomically.
pub fn write_csv_with(
    path: &Path,
    f: impl FnOnce(&mut Vec<u8>) -> perception_perf::Result<()>,
) -> CliResult<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn stamp() -> RunStamp {
        RunStamp {
            config_sha256: "ab12".into(),
            seed: 9,
        }
    }

    #[test]
    fn comment_and_wrap() {
        assert_eq!(stamp().comment(), "config_sha256=ab12 seed=9");
        let v = stamp().wrap(&json!({ "rows": [1] })).unwrap();
        assert_eq!(v, json!({ "config_sha256": "ab12", "seed": 9, "rows": [1] }));
        let v = stamp().wrap(&[1, 2]).unwrap();
        assert_eq!(v["data"], json!([1, 2]));
        assert_eq!(v["seed"], json!(9));
    }

    #[test]
    fn atomic_write_creates_parents_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        // no temp files left behind
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn json_output_ends_with_newline() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_json(&p, &stamp(), &json!({ "k": 1 })).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.ends_with("}\n"));
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["config_sha256"], json!("ab12"));
    }
}
