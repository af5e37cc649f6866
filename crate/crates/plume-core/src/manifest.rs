//! Corpus manifest: run ids, file names, split assignment, seeds, and the
//! normalization fitted on the training split.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::types::{NormalizationSpec, WindCondition};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEntry {
    pub run_id: String,
    pub file: String,
    pub seed: u64,
    pub condition: WindCondition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub runs: Vec<RunEntry>,
    pub split: SplitAssignment,
    pub normalization: NormalizationSpec,
    pub sampling_seed: u64,
    pub split_seed: u64,
    pub config_hash: String,
}

impl CorpusManifest {
    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Maps run_id -> file name for lookup.
    pub fn file_map(&self) -> BTreeMap<&str, &str> {
        self.runs
            .iter()
            .map(|r| (r.run_id.as_str(), r.file.as_str()))
            .collect()
    }
}

/// Deterministic 64-bit FNV-1a over a byte string; used to fingerprint
/// configs into artifacts so provenance survives across processes.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
