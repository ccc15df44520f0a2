use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use rignn::config::KvConfig;

/// Git-style content hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(content_hash(&std::fs::read(path)?))
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub rignn: &'static str,
    pub bundle: u32,
    pub topic_model: u32,
}

/// Provenance record written once per command run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub versions: Versions,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: BTreeMap::new(),
            config_hash: None,
            seeds: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock_secs: 0.0,
            versions: Versions {
                rignn: env!("CARGO_PKG_VERSION"),
                bundle: rignn::ingest::BUNDLE_VERSION,
                topic_model: rignn::topics::TOPIC_MODEL_VERSION,
            },
            started: Some(Instant::now()),
        }
    }

    pub fn set_config(&mut self, kv: &KvConfig) {
        self.config = kv
            .keys()
            .map(|k| (k.to_string(), kv.get_str(k).unwrap_or_default().to_string()))
            .collect();
        self.config_hash = Some(content_hash(kv.to_string().as_bytes()));
    }

    pub fn input(&mut self, name: &str, path: &Path) -> std::io::Result<()> {
        self.inputs.insert(name.to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) -> std::io::Result<()> {
        self.outputs.insert(name.to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn finish(mut self, path: &Path) -> anyhow::Result<PathBuf> {
        self.wall_clock_secs = self.started.map_or(0.0, |s| s.elapsed().as_secs_f64());
        let mut bytes = serde_json::to_vec_pretty(&self)?;
        bytes.push(b'\n');
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, bytes)?;
        Ok(path.to_path_buf())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_blob_scheme() {
        let mut h = Sha256::new();
        h.update(b"blob 6\0hello\n");
        assert_eq!(content_hash(b"hello\n"), format!("{:x}", h.finalize()));
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }
}
