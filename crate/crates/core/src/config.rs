//! Run configuration and explain-request files.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::explain::ExplainRequest;
use crate::io;
use crate::oracle::OracleSpec;
use crate::trainer::TrainConfig;
use crate::weighting::WeightingMethod;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error("{path}: line {line}, column {column}: {message} (at `{key}`)")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        key: String,
        message: String,
    },
    #[error("{path}: referenced path {referenced} does not exist")]
    MissingPath { path: PathBuf, referenced: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportToggles {
    #[serde(default = "yes")]
    pub csv: bool,
    #[serde(default = "yes")]
    pub svg: bool,
}

fn yes() -> bool {
    true
}

impl Default for ExportToggles {
    fn default() -> Self {
        Self { csv: true, svg: true }
    }
}

fn comparison_methods() -> Vec<WeightingMethod> {
    WeightingMethod::COMPARISON.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub oracle: OracleSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Methods for `compare-weighting`.
    #[serde(default = "comparison_methods")]
    pub methods: Vec<WeightingMethod>,
    #[serde(default)]
    pub explain: Vec<ExplainRequest>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub export: ExportToggles,
}

/// Contents of an explain request file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestFile {
    pub oracle: OracleSpec,
    pub requests: Vec<ExplainRequest>,
}

fn parse<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::Parse {
            path: path.to_path_buf(),
            line: inner.line(),
            column: inner.column(),
            key,
            message: inner.to_string(),
        }
    })
}

/// Relative file paths inside specs are taken relative to the file that
/// mentions them.
fn resolve_oracle(path: &Path, spec: &mut OracleSpec) -> Result<(), ConfigError> {
    let base = path.parent().unwrap_or(Path::new(""));
    let missing = |p: &Path| ConfigError::MissingPath {
        path: path.to_path_buf(),
        referenced: p.to_path_buf(),
    };
    match spec {
        OracleSpec::File { path: p, .. } => {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(missing(p));
            }
        }
        OracleSpec::Command { argv, .. } => {
            // Bare program names are looked up on PATH at run time.
            if let Some(program) = argv.first_mut() {
                if program.contains('/') {
                    let mut p = PathBuf::from(&*program);
                    if p.is_relative() {
                        p = base.join(p);
                    }
                    if !p.exists() {
                        return Err(missing(&p));
                    }
                    *program = p.to_string_lossy().into_owned();
                }
            }
        }
        OracleSpec::Analytic { .. } => {}
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = io::read_to_string(path)?;
        let mut cfg: RunConfig = parse(path, &text)?;
        resolve_oracle(path, &mut cfg.oracle)?;
        if cfg.output_dir.is_relative() {
            cfg.output_dir = path.parent().unwrap_or(Path::new("")).join(&cfg.output_dir);
        }
        Ok(cfg)
    }
}

impl RequestFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = io::read_to_string(path)?;
        let mut req: RequestFile = parse(path, &text)?;
        resolve_oracle(path, &mut req.oracle)?;
        Ok(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_fill_in() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run.json", r#"{"oracle": {"kind": "analytic", "name": "product"}}"#);
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.methods.len(), 4);
        assert_eq!(cfg.output_dir, dir.path().join("out"));
    }

    #[test]
    fn unknown_keys_report_their_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "run.json",
            "{\n  \"oracle\": {\"kind\": \"analytic\", \"name\": \"product\"},\n  \"train\": {\"batch_sise\": 10}\n}",
        );
        match RunConfig::load(&p).unwrap_err() {
            ConfigError::Parse { line, key, message, .. } => {
                assert_eq!(line, 3);
                assert!(key.starts_with("train"), "{key}");
                assert!(message.contains("batch_sise"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn referenced_files_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run.json", r#"{"oracle": {"kind": "file", "path": "missing.csv"}}"#);
        assert!(matches!(RunConfig::load(&p), Err(ConfigError::MissingPath { .. })));
        write(dir.path(), "present.csv", "1,2\n");
        let p = write(dir.path(), "run.json", r#"{"oracle": {"kind": "file", "path": "present.csv"}}"#);
        let cfg = RunConfig::load(&p).unwrap();
        assert!(matches!(cfg.oracle, OracleSpec::File { ref path, .. } if path.is_absolute()));
    }
}
