//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::COLUMN_ORDER_VERSION;
use crate::io::{self, IoError};
use crate::nn::Adam;
use crate::trainer::{Model, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("checkpoint is not valid JSON: {0}")]
    Parse(String),
    #[error("checkpoint format_version {found} is not supported (expected {expected})")]
    Version { found: String, expected: u32 },
    #[error("checkpoint column order `{found}` is not supported (expected `{expected}`)")]
    ColumnOrder { found: String, expected: &'static str },
    #[error("checkpoint is inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub column_order: String,
    pub d: usize,
    pub k: usize,
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: Model, optimizer: Adam) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            column_order: COLUMN_ORDER_VERSION.to_string(),
            d: model.d(),
            k: model.k(),
            config,
            model,
            optimizer,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CheckpointError::Parse(e.to_string()))?;
        let version = value.get("format_version");
        if version.and_then(serde_json::Value::as_u64) != Some(u64::from(FORMAT_VERSION)) {
            return Err(CheckpointError::Version {
                found: version.map_or("missing".to_string(), ToString::to_string),
                expected: FORMAT_VERSION,
            });
        }
        let order = value.get("column_order").and_then(serde_json::Value::as_str);
        if order != Some(COLUMN_ORDER_VERSION) {
            return Err(CheckpointError::ColumnOrder {
                found: order.unwrap_or("missing").to_string(),
                expected: COLUMN_ORDER_VERSION,
            });
        }
        // Re-parse from text: going through `Value` would lose float round-tripping.
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| CheckpointError::Parse(e.to_string()))?;
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<(), CheckpointError> {
        let bank = &self.model.bank;
        if bank.d != self.d || bank.k != self.k || bank.subnets.len() != self.d * self.k {
            return Err(CheckpointError::Inconsistent(format!(
                "header says d={} k={}, bank has d={} k={} with {} subnets",
                self.d,
                self.k,
                bank.d,
                bank.k,
                bank.subnets.len()
            )));
        }
        for (t, s) in bank.subnets.iter().enumerate() {
            if s.feature != t / self.k || s.basis != t % self.k {
                return Err(CheckpointError::Inconsistent(format!("subnet {t} is out of order")));
            }
        }
        let tr = &self.model.transform;
        if tr.shift.len() != self.d || tr.scale.len() != self.d {
            return Err(CheckpointError::Inconsistent("input transform length differs from d".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(io::write_atomic(path, self.to_json().as_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&io::read_to_string(path)?)
    }
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{AnalyticFunction, AnalyticOracle};
    use crate::trainer::fit;

    fn trained() -> Checkpoint {
        let cfg = TrainConfig {
            batch_size: 100,
            iterations: 5,
            k: 2,
            pairwise_enabled: true,
            surrogate_enabled: true,
            seed: 4,
            ..TrainConfig::default()
        };
        let o = AnalyticOracle::new(AnalyticFunction::Product, 2).unwrap();
        let t = fit(&o, &cfg).unwrap();
        Checkpoint::new(cfg, t.model, t.optimizer)
    }

    #[test]
    fn save_load_save_is_byte_stable() {
        let ck = trained();
        let a = ck.to_json();
        let back = Checkpoint::from_json(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json(), a);
    }

    #[test]
    fn version_mismatch_names_the_tag() {
        let text = trained().to_json().replacen("\"format_version\": 1", "\"format_version\": 7", 1);
        let err = Checkpoint::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("format_version 7"), "{err}");
        let text = trained().to_json().replace(COLUMN_ORDER_VERSION, "singles-only/v0");
        assert!(matches!(Checkpoint::from_json(&text), Err(CheckpointError::ColumnOrder { .. })));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = trained().to_json().replacen('{', "{\"extra\": 1,", 1);
        assert!(matches!(Checkpoint::from_json(&text), Err(CheckpointError::Parse(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        let ck = trained();
        ck.save(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        Checkpoint::load(&p).unwrap().save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        assert_eq!(sha256_hex(b"abc").len(), 64);
    }
}
