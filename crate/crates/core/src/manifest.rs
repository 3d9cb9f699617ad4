//! Run manifests: the minimal identity card embedded in every emitted
//! report so two artifacts can be checked for comparability.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub corpus_hash: String,
    pub code_version: String,
    pub provider_ids: BTreeMap<String, String>,
    pub created_at: String,
}

impl RunManifest {
    pub fn new(
        config_hash: impl Into<String>,
        corpus_hash: impl Into<String>,
        provider_ids: BTreeMap<String, String>,
    ) -> Self {
        Self {
            config_hash: config_hash.into(),
            corpus_hash: corpus_hash.into(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            provider_ids,
            created_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    /// Two reports are comparable when everything but the timestamp agrees.
    pub fn comparable(&self, other: &RunManifest) -> bool {
        self.config_hash == other.config_hash
            && self.corpus_hash == other.corpus_hash
            && self.code_version == other.code_version
            && self.provider_ids == other.provider_ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
