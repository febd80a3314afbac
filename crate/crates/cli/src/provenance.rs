//! Report files carrying the tool version, config hash and seed.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::LoadedConfig;
use crate::error::{data, CliResult};

pub const TOOL: &str = "videns";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(cfg: &LoadedConfig) -> Self {
        Self {
            tool: TOOL,
            version: VERSION,
            config_sha256: cfg.hash(),
            seed: cfg.config.seed,
        }
    }

    /// `# videns <version> config_sha256=<hex> seed=<seed>`
    pub fn header(&self) -> String {
        format!(
            "# {} {} config_sha256={} seed={}",
            self.tool, self.version, self.config_sha256, self.seed
        )
    }

    /// Writes the header line followed by whatever `body` emits.
    pub fn write_csv(
        &self,
        path: &Path,
        body: impl FnOnce(&mut Vec<u8>) -> videns_core::Result<()>,
    ) -> CliResult<()> {
        let mut buf = format!("{}\n", self.header()).into_bytes();
        body(&mut buf)?;
        write_bytes(path, &buf)
    }

    pub fn write_text(&self, path: &Path, body: &str) -> CliResult<()> {
        write_bytes(path, format!("{}\n{body}", self.header()).as_bytes())
    }

    /// Writes `{"provenance": ..., <fields of body>}` as pretty JSON.
    pub fn write_json(&self, path: &Path, body: impl Serialize) -> CliResult<()> {
        let mut obj = Map::new();
        obj.insert("provenance".into(), serde_json::to_value(self).map_err(videns_core::Error::from)?);
        match serde_json::to_value(body).map_err(videns_core::Error::from)? {
            Value::Object(fields) => obj.extend(fields),
            other => {
                obj.insert("result".into(), other);
            }
        }
        let text = serde_json::to_string_pretty(&Value::Object(obj)).map_err(videns_core::Error::from)?;
        write_bytes(path, format!("{text}\n").as_bytes())
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| data(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| data(format!("cannot write {}: {e}", path.display())))
}

/// Lines of a report file after the provenance header.
pub fn strip_header(text: &str) -> &str {
    match text.strip_prefix("# ") {
        Some(rest) => rest.split_once('\n').map_or("", |(_, body)| body),
        None => text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        let cfg = LoadedConfig::from_bytes(br#"{"schema_version": 1, "seed": 9}"#.to_vec(), Path::new(".")).unwrap();
        Provenance::new(&cfg)
    }

    #[test]
    fn header_names_version_hash_and_seed() {
        let h = prov().header();
        assert!(h.starts_with(&format!("# videns {VERSION} config_sha256=")));
        assert!(h.ends_with(" seed=9"));
    }

    #[test]
    fn json_reports_lead_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        prov().write_json(&path, serde_json::json!({"gap": 0.5})).unwrap();
        let v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["provenance"]["seed"], 9);
        assert_eq!(v["gap"], 0.5);
    }

    #[test]
    fn csv_reports_start_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/r.csv");
        prov()
            .write_csv(&path, |w| {
                w.extend_from_slice(b"a,b\n1,2\n");
                Ok(())
            })
            .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(strip_header(&text), "a,b\n1,2\n");
    }
}
