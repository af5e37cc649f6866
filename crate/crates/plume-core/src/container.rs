//! The `PLM1` run-file format: one file per simulated run holding the paired
//! low- and high-resolution sequences as raw 32-bit floats plus a JSON
//! header (shapes, cadence, cell sizes, wind condition, normalization).

use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blob::{read_sections, write_sections, Section};
use crate::error::CoreError;
use crate::types::{ConcentrationSequence, DualResolutionSample, NormalizationSpec, WindCondition};

pub const RUN_MAGIC: [u8; 4] = *b"PLM1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridMeta {
    pub shape: [usize; 4],
    pub cell_size_zyx: [f64; 3],
    pub origin_zyx: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub condition: WindCondition,
    pub dt_output: f64,
    pub lr: GridMeta,
    pub hr: GridMeta,
    /// Corpus-level normalization, if known at write time. Raw blobs are
    /// always stored in linear concentration units.
    pub normalization: Option<NormalizationSpec>,
    pub seed: u64,
    pub config_hash: String,
}

fn grid_meta(seq: &ConcentrationSequence) -> GridMeta {
    let s = seq.values.shape();
    GridMeta {
        shape: [s[0], s[1], s[2], s[3]],
        cell_size_zyx: seq.cell_size_zyx,
        origin_zyx: seq.origin_zyx,
    }
}

pub fn write_run(
    path: &Path,
    sample: &DualResolutionSample,
    normalization: Option<NormalizationSpec>,
    seed: u64,
    config_hash: &str,
) -> Result<(), CoreError> {
    let header = RunHeader {
        run_id: sample.run_id.clone(),
        condition: sample.condition,
        dt_output: sample.lr.dt_output,
        lr: grid_meta(&sample.lr),
        hr: grid_meta(&sample.hr),
        normalization,
        seed,
        config_hash: config_hash.to_string(),
    };
    let meta: Value = serde_json::to_value(&header)?;
    let lr_slice = sample
        .lr
        .values
        .as_slice()
        .ok_or_else(|| CoreError::invalid("lr array not contiguous"))?;
    let hr_slice = sample
        .hr
        .values
        .as_slice()
        .ok_or_else(|| CoreError::invalid("hr array not contiguous"))?;
    write_sections(
        path,
        RUN_MAGIC,
        &meta,
        &[
            Section {
                name: "lr",
                data: lr_slice,
            },
            Section {
                name: "hr",
                data: hr_slice,
            },
        ],
    )
}

pub fn read_run(path: &Path) -> Result<(RunHeader, DualResolutionSample), CoreError> {
    let mut file = read_sections(path, RUN_MAGIC)?;
    let header: RunHeader = serde_json::from_value(file.meta.clone())?;

    let lr_data = file
        .take_section("lr")
        .ok_or_else(|| CoreError::Format("missing lr section".into()))?;
    let hr_data = file
        .take_section("hr")
        .ok_or_else(|| CoreError::Format("missing hr section".into()))?;

    let to_seq = |meta: &GridMeta, data: Vec<f32>| -> Result<ConcentrationSequence, CoreError> {
        let [t, z, y, x] = meta.shape;
        let values = Array4::from_shape_vec((t, z, y, x), data)
            .map_err(|e| CoreError::Format(format!("blob/shape mismatch: {e}")))?;
        Ok(ConcentrationSequence::new(
            values,
            header.dt_output,
            meta.cell_size_zyx,
            meta.origin_zyx,
        ))
    };

    let lr = to_seq(&header.lr, lr_data)?;
    let hr = to_seq(&header.hr, hr_data)?;
    let sample = DualResolutionSample {
        run_id: header.run_id.clone(),
        condition: header.condition,
        lr,
        hr,
    };
    Ok((header, sample))
}
