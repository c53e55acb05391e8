//! Native volume format and the dataset manifest.
//!
//! A volume is a JSON sidecar header
//!
//! ```json
//! {"shape": [nx, ny, nz], "spacing": [sx, sy, sz], "dtype": "f32", "order": "C"}
//! ```
//!
//! next to a raw little-endian payload with the same stem and a `.raw`
//! extension. Masks use `"dtype": "u8"`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: DType,
    pub order: String,
}

impl VolumeHeader {
    fn new(g: Geometry, dtype: DType) -> Self {
        VolumeHeader {
            shape: g.shape,
            spacing: g.spacing,
            dtype,
            order: "C".into(),
        }
    }

    fn geometry(&self, path: &Path) -> Result<Geometry> {
        if self.order != "C" {
            return Err(Error::format(path, format!("unsupported order {:?}", self.order)));
        }
        Geometry::new(self.shape, self.spacing).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Payload path belonging to a header path.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn write_header(path: &Path, header: &VolumeHeader) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(header).expect("header serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_header(path, &VolumeHeader::new(*v.geometry(), DType::F32))?;
    let mut bytes = Vec::with_capacity(v.data().len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let raw = payload_path(path);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    write_header(path, &VolumeHeader::new(m.geometry(), DType::U8))?;
    let raw = payload_path(path);
    fs::write(&raw, m.data()).map_err(|e| Error::io(&raw, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path)?;
    let g = header.geometry(path)?;
    let raw = payload_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let data: Vec<f32> = match header.dtype {
        DType::F32 => {
            if bytes.len() != g.len() * 4 {
                return Err(Error::format(&raw, format!("expected {} bytes, found {}", g.len() * 4, bytes.len())));
            }
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        DType::U8 => {
            if bytes.len() != g.len() {
                return Err(Error::format(&raw, format!("expected {} bytes, found {}", g.len(), bytes.len())));
            }
            bytes.iter().map(|&b| b as f32).collect()
        }
    };
    Volume::new(g, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let header = read_header(path)?;
    if header.dtype != DType::U8 {
        return Err(Error::format(path, "mask files must use dtype u8"));
    }
    let g = header.geometry(path)?;
    let raw = payload_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() != g.len() {
        return Err(Error::format(&raw, format!("expected {} bytes, found {}", g.len(), bytes.len())));
    }
    Mask::new(g, bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub domain: String,
    /// Header path of the intensity volume, relative to the manifest directory.
    pub volume_path: String,
    /// Header path of the ground-truth mask, relative to the manifest directory.
    pub mask_path: String,
}

/// Case listing shared by the synthetic generator and external ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "default_dataset_version")]
    pub schema_version: u32,
    pub domains: Vec<String>,
    pub cases: Vec<CaseEntry>,
}

fn default_dataset_version() -> u32 {
    DATASET_SCHEMA_VERSION
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        for c in &m.cases {
            if !m.domains.contains(&c.domain) {
                return Err(Error::format(
                    path,
                    format!("case {} references unknown domain {}", c.id, c.domain),
                ));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn cases_in<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a CaseEntry> + 'a {
        self.cases.iter().filter(move |c| c.domain == domain)
    }
}

/// A case loaded from disk.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub id: String,
    pub domain: String,
    pub volume: Volume,
    pub mask: Mask,
}

pub fn load_case(root: &Path, entry: &CaseEntry) -> Result<LoadedCase> {
    let volume = read_volume(&root.join(&entry.volume_path))?;
    let mask = read_mask(&root.join(&entry.mask_path))?;
    if volume.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "case {}: volume {:?} vs mask {:?}",
            entry.id,
            volume.shape(),
            mask.shape()
        )));
    }
    Ok(LoadedCase {
        id: entry.id.clone(),
        domain: entry.domain.clone(),
        volume,
        mask,
    })
}
