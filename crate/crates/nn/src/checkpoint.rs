//! Checkpoint container.
//!
//! ```text
//! offset 0   8 bytes   magic "LSHFTCKP"
//! offset 8   4 bytes   header length H, u32 little-endian
//! offset 12  H bytes   UTF-8 JSON header
//! offset 12+H          tensor payload, f32 little-endian, in header order
//! ```
//!
//! The header holds the format version, the model spec, the layer groups and
//! a tensor index (`name`, `kind`, `shape`, `offset` and `len` in elements).
//! Running statistics are stored like any other tensor, so a round trip is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::model::{GroupName, LayerGroup, ModelSpec, SegmentationModel};
use crate::params::TensorKind;

pub const MAGIC: &[u8; 8] = b"LSHFTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub spec: ModelSpec,
    pub layer_groups: BTreeMap<GroupName, LayerGroup>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &SegmentationModel<f32>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for p in model.params().iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: p.kind,
            shape: p.shape.clone(),
            offset,
            len: p.len(),
        });
        offset += p.len();
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        spec: model.spec().clone(),
        layer_groups: model.layer_groups(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params().iter() {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<SegmentationModel<f32>> {
    let bad = |msg: String| NnError::Checkpoint {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    if header.dtype != "f32" {
        return Err(bad(format!("unsupported dtype {}", header.dtype)));
    }
    let payload = &bytes[12 + hlen..];
    let mut model = SegmentationModel::<f32>::new(header.spec.clone(), 0).map_err(|e| bad(e.to_string()))?;
    if header.tensors.len() != model.params().len() {
        return Err(bad(format!(
            "{} tensors stored, spec needs {}",
            header.tensors.len(),
            model.params().len()
        )));
    }
    for t in &header.tensors {
        let id = model
            .params()
            .id(&t.name)
            .ok_or_else(|| bad(format!("unexpected tensor {}", t.name)))?;
        let p = model.params_mut().get_mut(id);
        if p.shape != t.shape || p.kind != t.kind || p.len() != t.len {
            return Err(bad(format!("tensor {} does not match the spec", t.name)));
        }
        let raw = payload
            .get(t.offset * 4..(t.offset + t.len) * 4)
            .ok_or_else(|| bad(format!("payload too short for {}", t.name)))?;
        for (v, c) in p.value.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    Ok(model)
}

pub fn save(model: &SegmentationModel<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| NnError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, to_bytes(model)).map_err(|e| NnError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load(path: &Path) -> Result<SegmentationModel<f32>> {
    let bytes = fs::read(path).map_err(|e| NnError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    from_bytes(&bytes, path)
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| NnError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let bad = |msg: String| NnError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = SegmentationModel::<f32>::new(ModelSpec::new(Variant::ResidualUnet, 2, 2), 5).unwrap();
        // odd values including a negative zero and a subnormal
        let id = m.params().id("stem.bn.running_mean").unwrap();
        m.params_mut().get_mut(id).value[0] = -0.0;
        m.params_mut().get_mut(id).value[1] = f32::from_bits(1);
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.value.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_input_rejected() {
        let m = SegmentationModel::<f32>::new(ModelSpec::new(Variant::VanillaUnet, 2, 2), 5).unwrap();
        let bytes = to_bytes(&m);
        assert!(from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(from_bytes(b"nonsense", Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad, Path::new("x")).is_err());
    }
}
