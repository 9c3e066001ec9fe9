//! On-disk artifacts: DCS1 grid dumps, CSV tables and the run manifest.
//!
//! DCS1 layout: the 4 bytes `DCS1`, then `u32 nx`, `u32 ny`, `u32 channels`
//! (little-endian), then `channels` row-major planes of `nx·ny` little-endian
//! f64 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::EngineError;
use crate::photophysics::Beam;
use crate::protocol::ReadoutMode;

pub const DCS1_MAGIC: &[u8; 4] = b"DCS1";

/// Decoded DCS1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDump {
    pub nx: usize,
    pub ny: usize,
    pub planes: Vec<Vec<f64>>,
}

pub fn encode_dcs1(nx: usize, ny: usize, planes: &[&[f64]]) -> Result<Vec<u8>, EngineError> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| EngineError::Format(format!("{what} {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(16 + planes.len() * nx * ny * 8);
    out.extend_from_slice(DCS1_MAGIC);
    out.extend_from_slice(&to_u32(nx, "nx")?.to_le_bytes());
    out.extend_from_slice(&to_u32(ny, "ny")?.to_le_bytes());
    out.extend_from_slice(&to_u32(planes.len(), "channel count")?.to_le_bytes());
    for p in planes {
        if p.len() != nx * ny {
            return Err(EngineError::Format(format!(
                "plane has {} values, expected {}",
                p.len(),
                nx * ny
            )));
        }
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dcs1(bytes: &[u8]) -> Result<GridDump, EngineError> {
    if bytes.len() < 16 || &bytes[..4] != DCS1_MAGIC {
        return Err(EngineError::Format("missing DCS1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (nx, ny, nc) = (word(4), word(8), word(12));
    let plane = nx * ny;
    let expected = 16 + nc * plane * 8;
    if bytes.len() != expected {
        return Err(EngineError::Format(format!(
            "DCS1 body is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let planes = (0..nc)
        .map(|c| {
            let start = 16 + c * plane * 8;
            bytes[start..start + plane * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect()
        })
        .collect();
    Ok(GridDump { nx, ny, planes })
}

pub fn write_dcs1(path: &Path, nx: usize, ny: usize, planes: &[&[f64]]) -> Result<(), EngineError> {
    let bytes = encode_dcs1(nx, ny, planes)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_dcs1(path: &Path) -> Result<GridDump, EngineError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_dcs1(&bytes)
}

/// Writes a table with a header row. Floats use Rust's shortest round-trip
/// formatting so files are byte-stable.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EngineError::Io(e.to_string()))?;
    w.write_record(header).map_err(|e| EngineError::Io(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| EngineError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`] into header and numeric columns.
pub fn read_csv_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), EngineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| EngineError::Io(e.to_string()))?;
    let header = r
        .headers()
        .map_err(|e| EngineError::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut cols = vec![Vec::new(); header.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| EngineError::Format(e.to_string()))?;
        for (c, v) in cols.iter_mut().zip(rec.iter()) {
            c.push(v.to_string());
        }
    }
    Ok((header, cols))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    ReadoutImage,
    Snapshot,
    Series,
    Trace,
    Histogram,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub kind: ArtifactKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<String>,
    /// Protocol time, s.
    pub timestamp: f64,
    /// Plane names for DCS1 artifacts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub planes: Vec<String>,
    /// Image geometry for readout artifacts: [pitch, origin_x, origin_y].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<[f64; 3]>,
    /// Readout beam and mode for readout artifacts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam: Option<Beam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ReadoutMode>,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub engine_version: String,
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub overrides: Vec<String>,
    /// Unix time, s.
    pub started: f64,
    pub finished: f64,
    pub final_time: f64,
    pub artifacts: Vec<ArtifactRecord>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), EngineError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| EngineError::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| EngineError::Format(e.to_string()))
    }
}
