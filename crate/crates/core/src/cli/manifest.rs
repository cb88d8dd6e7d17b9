use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::dataset_paths;
use crate::error::{Error, Result};
use crate::taxonomy::hex_digest;

/// Everything needed to replay a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config: Value,
    /// SHA-256 over each input dataset's files.
    pub dataset_hashes: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_ms: u128,
    pub tool_version: String,
}

pub(super) struct ManifestBuilder {
    started: Instant,
    pub manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, argv: Vec<String>, config_path: Option<&Path>) -> Self {
        ManifestBuilder {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                argv,
                config_path: config_path.map(Path::to_path_buf),
                config: Value::Null,
                dataset_hashes: BTreeMap::new(),
                seed: None,
                artifacts: Vec::new(),
                wall_clock_ms: 0,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
            },
        }
    }

    pub fn dataset(&mut self, name: &str, base: &Path) -> Result<()> {
        let hash = dataset_hash(base)?;
        self.manifest.dataset_hashes.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) {
        self.manifest.artifacts.push(path.to_path_buf());
    }

    /// Writes `manifest.json` in `dir` via a temporary file and rename.
    pub fn finish(mut self, dir: &Path) -> Result<RunManifest> {
        self.manifest.wall_clock_ms = self.started.elapsed().as_millis();
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = dir.join("manifest.json");
        let tmp = dir.join(".manifest.json.tmp");
        std::fs::write(&tmp, text + "\n").map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))?;
        Ok(self.manifest)
    }
}

/// Hash of a saved dataset's files, in a fixed order.
pub fn dataset_hash(base: &Path) -> Result<String> {
    let p = dataset_paths(base);
    let mut parts = String::new();
    for path in [&p.header, &p.body, &p.embeddings, &p.oracle] {
        match std::fs::read(path) {
            Ok(bytes) => parts.push_str(&hex_digest(&bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && path == &p.oracle => {}
            Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
        }
    }
    Ok(hex_digest(parts.as_bytes()))
}
