//! Run manifests: one JSON record per artifact directory describing the
//! command that produced it.

use std::path::Path;

use serde::Serialize;

use rtdlm_core::Result;

#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    pub build_id: &'a str,
    pub started_at_unix: i64,
    pub started_at: String,
}

pub fn build_id() -> &'static str {
    option_env!("RTDLM_BUILD_ID").unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
}

/// Writes `run_manifest.json` into `dir`.
pub fn write_into_dir(dir: &Path, command: &str, config_path: Option<&Path>, seed: Option<u64>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let now = chrono::Utc::now();
    let manifest = RunManifest {
        command,
        config_path: config_path.map(|p| p.display().to_string()),
        seed,
        build_id: build_id(),
        started_at_unix: now.timestamp(),
        started_at: now.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("run_manifest.json"), json)?;
    Ok(())
}

/// Writes `<out>.run.json` next to a file artifact.
pub fn write_sibling(out_file: &Path, command: &str, config_path: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let now = chrono::Utc::now();
    let manifest = RunManifest {
        command,
        config_path: config_path.map(|p| p.display().to_string()),
        seed,
        build_id: build_id(),
        started_at_unix: now.timestamp(),
        started_at: now.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    let mut path = out_file.as_os_str().to_owned();
    path.push(".run.json");
    std::fs::write(path, json)?;
    Ok(())
}
