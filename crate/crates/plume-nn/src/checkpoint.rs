//! Self-describing checkpoint container (`PCK1`): model kind, architecture
//! config, normalization, training history, optimizer/scheduler state, and
//! both the best-validation and the final weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use plume_core::blob::{read_sections, write_sections, BlobFile, Section};
use plume_core::NormalizationSpec;

use crate::error::NnError;
use crate::scheduler::ReduceLrOnPlateau;
use crate::trainer::{EpochRecord, Trainer};

pub const CKPT_MAGIC: [u8; 4] = *b"PCK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Model kind tag: "tm", "srm", or "hrtm".
    pub kind: String,
    /// Architecture config, serialized by the owning model crate.
    pub config: Value,
    pub normalization: Option<NormalizationSpec>,
    pub history: Vec<EpochRecord>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub next_epoch: usize,
    pub lr: f64,
    pub adam_step: u64,
    pub scheduler: ReduceLrOnPlateau,
    pub seed: u64,
    pub config_hash: String,
}

/// Writes a checkpoint: `best/<name>` sections for the best-validation
/// state, `last/<name>` for the final state, `adam/<name>` for moments.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    best_state: &[(String, Vec<f32>)],
    last_state: &[(String, Vec<f32>)],
    adam_state: &[(String, Vec<f32>)],
) -> Result<(), NnError> {
    let meta_value = serde_json::to_value(meta).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut named: Vec<(String, &[f32])> = Vec::new();
    for (n, v) in best_state {
        named.push((format!("best/{n}"), v.as_slice()));
    }
    for (n, v) in last_state {
        named.push((format!("last/{n}"), v.as_slice()));
    }
    for (n, v) in adam_state {
        named.push((format!("adam/{n}"), v.as_slice()));
    }
    let sections: Vec<Section<'_>> = named
        .iter()
        .map(|(n, d)| Section { name: n, data: d })
        .collect();
    write_sections(path, CKPT_MAGIC, &meta_value, &sections)?;
    Ok(())
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blobs: BlobFile,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self, NnError> {
        let blobs = read_sections(path, CKPT_MAGIC)?;
        let meta: CheckpointMeta = serde_json::from_value(blobs.meta.clone())
            .map_err(|e| NnError::Checkpoint(format!("bad checkpoint header: {e}")))?;
        Ok(Checkpoint { meta, blobs })
    }

    /// Lookup closure over the `best/` (or `last/`) namespace.
    pub fn state_lookup<'a>(&'a self, namespace: &'a str) -> impl FnMut(&str) -> Option<Vec<f32>> + 'a {
        move |name: &str| {
            self.blobs
                .section(&format!("{namespace}/{name}"))
                .map(|s| s.to_vec())
        }
    }

    /// Rebuilds trainer bookkeeping (optimizer moments are loaded by the
    /// caller once the model's parameter list exists).
    pub fn trainer_skeleton(&self) -> Trainer {
        let mut adam = crate::adam::Adam::new(self.meta.lr);
        adam.step_count = self.meta.adam_step;
        Trainer {
            adam,
            scheduler: self.meta.scheduler.clone(),
            next_epoch: self.meta.next_epoch,
            history: self.meta.history.clone(),
            best_val: self.meta.best_val,
            best_epoch: self.meta.best_epoch,
            best_state: self
                .blobs
                .sections
                .iter()
                .filter_map(|(n, v)| {
                    n.strip_prefix("best/").map(|s| (s.to_string(), v.clone()))
                })
                .collect(),
        }
    }
}

/// Writes per-epoch history as CSV: `epoch,train_mse,val_mse,lr`.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), NnError> {
    let mut out = String::from("epoch,train_mse,val_mse,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e}\n",
            r.epoch, r.train_mse, r.val_mse, r.lr
        ));
    }
    std::fs::write(path, out).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    Ok(())
}
