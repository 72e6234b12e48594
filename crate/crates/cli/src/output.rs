//! Every JSON output and artifact carries the resolved configuration and the
//! tool version.

use std::path::{Path, PathBuf};

use ragcap_core::fsutil::write_atomic;
use ragcap_core::TOOL_VERSION;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Failure;

#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize> {
    #[serde(flatten)]
    pub body: T,
    pub tool_version: &'static str,
    pub run_config: &'a RunConfig,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    artifact: String,
    tool_version: &'static str,
    run_config: &'a RunConfig,
}

pub fn wrap<T: Serialize>(body: T, cfg: &RunConfig) -> Envelope<'_, T> {
    Envelope { body, tool_version: TOOL_VERSION, run_config: cfg }
}

/// Prints one JSON line on stdout.
pub fn emit<T: Serialize>(body: T, cfg: &RunConfig) -> Result<(), Failure> {
    let line = serde_json::to_string(&wrap(body, cfg)).map_err(|e| Failure::runtime("serialize", e))?;
    println!("{line}");
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, body: T, cfg: &RunConfig) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(&wrap(body, cfg)).map_err(|e| Failure::runtime("serialize", e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| io_failure(path, e))
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

/// Writes `<artifact>.provenance.json` next to a binary or JSONL artifact.
pub fn write_sidecar(artifact: &Path, command: &str, cfg: &RunConfig) -> Result<(), Failure> {
    let p = Provenance {
        command,
        artifact: artifact.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        tool_version: TOOL_VERSION,
        run_config: cfg,
    };
    let mut bytes = serde_json::to_vec_pretty(&p).map_err(|e| Failure::runtime("serialize", e))?;
    bytes.push(b'\n');
    let path = sidecar_path(artifact);
    write_atomic(&path, &bytes).map_err(|e| io_failure(&path, e))
}

pub fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime("io_error", format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_flattens_body() {
        #[derive(Serialize)]
        struct Body {
            count: usize,
        }
        let cfg = RunConfig::default();
        let v: serde_json::Value = serde_json::to_value(wrap(Body { count: 3 }, &cfg)).unwrap();
        assert_eq!(v["count"], 3);
        assert_eq!(v["tool_version"], TOOL_VERSION);
        assert_eq!(v["run_config"]["seed"], 0);
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("/a/idx.rvi")), PathBuf::from("/a/idx.rvi.provenance.json"));
    }
}
