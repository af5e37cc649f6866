//! Little-endian section container: a 4-byte magic, a JSON header, then raw
//! `f32` blobs. Shared by the run-file format and model checkpoints.
//!
//! Layout: `magic | u32 header_len | header bytes | blob_0 | blob_1 | ...`
//! where the header is `{"meta": <caller header>, "sections": [{"name", "len"}]}`.
//! Writes go to a temp file in the target directory and are renamed into
//! place, so readers never observe partial files.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::{json, Value};

use crate::error::CoreError;

pub struct Section<'a> {
    pub name: &'a str,
    pub data: &'a [f32],
}

pub fn write_sections(
    path: &Path,
    magic: [u8; 4],
    meta: &Value,
    sections: &[Section<'_>],
) -> Result<(), CoreError> {
    let table: Vec<Value> = sections
        .iter()
        .map(|s| json!({"name": s.name, "len": s.data.len()}))
        .collect();
    let header = json!({"meta": meta, "sections": table});
    let header_bytes = serde_json::to_vec(&header)?;

    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "blob".to_string()),
        std::process::id()
    ));
    {
        let file = fs::File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        w.write_all(&magic)?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for s in sections {
            for &v in s.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub struct BlobFile {
    pub meta: Value,
    pub sections: Vec<(String, Vec<f32>)>,
}

impl BlobFile {
    pub fn section(&self, name: &str) -> Option<&[f32]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
    }

    pub fn take_section(&mut self, name: &str) -> Option<Vec<f32>> {
        let idx = self.sections.iter().position(|(n, _)| n == name)?;
        Some(self.sections.remove(idx).1)
    }
}

pub fn read_sections(path: &Path, magic: [u8; 4]) -> Result<BlobFile, CoreError> {
    let file = fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut got_magic = [0u8; 4];
    r.read_exact(&mut got_magic)?;
    if got_magic != magic {
        return Err(CoreError::Format(format!(
            "bad magic in {}: expected {:?}, found {:?}",
            path.display(),
            magic,
            got_magic
        )));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Value = serde_json::from_slice(&header_bytes)?;

    let meta = header
        .get("meta")
        .cloned()
        .ok_or_else(|| CoreError::Format("missing meta in header".into()))?;
    let table = header
        .get("sections")
        .and_then(|v| v.as_array())
        .ok_or_else(|| CoreError::Format("missing section table".into()))?;

    let mut sections = Vec::with_capacity(table.len());
    for entry in table {
        let name = entry
            .get("name")
            .and_then(|v| v.as_str())
            .ok_or_else(|| CoreError::Format("section without name".into()))?
            .to_string();
        let len = entry
            .get("len")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CoreError::Format("section without len".into()))? as usize;
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        sections.push((name, data));
    }
    Ok(BlobFile { meta, sections })
}
