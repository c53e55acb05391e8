//! Ingestion of NIfTI-1 volumes (`.nii`, `.nii.gz`) into the native format.
//!
//! Only what the pipeline needs is read: dimensions, voxel sizes, the data
//! type, the data offset and the intensity scaling. Orientation matrices are
//! ignored; the third array axis is taken as axial.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use layershift_core::io::{self, CaseEntry, DatasetManifest, DATASET_SCHEMA_VERSION};
use layershift_core::{Geometry, Mask, Volume};

use crate::error::{Result, StudyError};

const HEADER_LEN: usize = 348;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Scaled intensities, first axis fastest as stored in the file.
    pub data: Vec<f32>,
}

impl NiftiImage {
    fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[x + self.shape[0] * (y + self.shape[1] * z)]
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Ok(Geometry::new(self.shape, self.spacing)?)
    }

    pub fn to_volume(&self) -> Result<Volume> {
        Ok(Volume::from_fn(self.geometry()?, |x, y, z| self.at(x, y, z))?)
    }

    /// Nonzero voxels become foreground.
    pub fn to_mask(&self) -> Result<Mask> {
        Ok(Mask::from_fn(self.geometry()?, |x, y, z| self.at(x, y, z) != 0.0)?)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| StudyError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| StudyError::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let b = read_bytes(path)?;
    decode_nifti(&b).map_err(|msg| StudyError::format(path, msg))
}

pub fn decode_nifti(b: &[u8]) -> std::result::Result<NiftiImage, String> {
    if b.len() < HEADER_LEN {
        return Err("file shorter than a NIfTI-1 header".into());
    }
    let little = match (i32::from_le_bytes(b[0..4].try_into().unwrap()), i32::from_be_bytes(b[0..4].try_into().unwrap())) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err("sizeof_hdr is not 348".into()),
    };
    if &b[344..347] != b"n+1" && &b[344..347] != b"ni1" {
        return Err("missing NIfTI-1 magic".into());
    }
    let i16_at = |o: usize| {
        let a = [b[o], b[o + 1]];
        if little { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }
    };
    let f32_at = |o: usize| {
        let a = [b[o], b[o + 1], b[o + 2], b[o + 3]];
        if little { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }
    };
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("bad dimension count {ndim}"));
    }
    let mut shape = [1usize; 3];
    for (a, s) in shape.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let d = i16_at(42 + 2 * a);
        if d < 1 {
            return Err(format!("bad extent {d} on axis {a}"));
        }
        *s = d as usize;
    }
    for a in 3..ndim as usize {
        if i16_at(42 + 2 * a) > 1 {
            return Err("only single 3D volumes are supported".into());
        }
    }
    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = f32_at(80 + 4 * a).abs() as f64;
        if p.is_finite() && p > 0.0 {
            *s = p;
        }
    }
    let datatype = i16_at(70);
    let offset = f32_at(108).max(HEADER_LEN as f32) as usize;
    let (slope, inter) = (f32_at(112), f32_at(116));
    let n: usize = shape.iter().product();
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(format!("unsupported datatype {other}")),
    };
    let body = b
        .get(offset..offset + n * width)
        .ok_or_else(|| format!("payload needs {} bytes after offset {offset}", n * width))?;
    let mut data = Vec::with_capacity(n);
    for c in body.chunks_exact(width) {
        let v = match datatype {
            2 => c[0] as f64,
            256 => c[0] as i8 as f64,
            4 => i16_at_slice(c, little) as f64,
            512 => u16_at_slice(c, little) as f64,
            8 => i32_from(c, little) as f64,
            768 => i32_from(c, little) as u32 as f64,
            16 => f32::from_bits(i32_from(c, little) as u32) as f64,
            _ => {
                let a: [u8; 8] = c.try_into().unwrap();
                if little { f64::from_le_bytes(a) } else { f64::from_be_bytes(a) }
            }
        };
        data.push(v);
    }
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let data = data
        .into_iter()
        .map(|v| if scaled { (v * slope as f64 + inter as f64) as f32 } else { v as f32 })
        .collect();
    Ok(NiftiImage { shape, spacing, data })
}

fn i16_at_slice(c: &[u8], little: bool) -> i16 {
    if little { i16::from_le_bytes([c[0], c[1]]) } else { i16::from_be_bytes([c[0], c[1]]) }
}

fn u16_at_slice(c: &[u8], little: bool) -> u16 {
    i16_at_slice(c, little) as u16
}

fn i32_from(c: &[u8], little: bool) -> i32 {
    let a = [c[0], c[1], c[2], c[3]];
    if little { i32::from_le_bytes(a) } else { i32::from_be_bytes(a) }
}

/// Minimal little-endian float32 NIfTI-1 file, first axis fastest.
pub fn encode_nifti(shape: [usize; 3], spacing: [f64; 3], data: &[f32]) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dims = [3i16, shape[0] as i16, shape[1] as i16, shape[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&16i16.to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    let pix = [1.0f32, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32];
    for (i, p) in pix.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    for v in data {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h
}

fn nifti_stem(p: &Path) -> Option<String> {
    let name = p.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).map(str::to_string)
}

fn list_nifti(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| StudyError::io(dir, e))? {
        let p = e.map_err(|e| StudyError::io(dir, e))?.path();
        if let Some(stem) = nifti_stem(&p) {
            out.push((stem, p));
        }
    }
    out.sort();
    Ok(out)
}

/// Domain label from file names of the form `ID_vendor_field_...`, e.g.
/// `CC0001_philips_15_55_M` gives `philips_15`.
pub fn domain_from_stem(stem: &str) -> String {
    let t: Vec<&str> = stem.split('_').collect();
    if t.len() >= 3 {
        format!("{}_{}", t[1], t[2])
    } else {
        "default".into()
    }
}

/// Converts every image in `images` with a mask in `masks` whose file name
/// starts with the image's stem. Writes native files and `dataset.json`
/// under `out`.
pub fn ingest_dir(images: &Path, masks: &Path, out: &Path, domain: Option<&str>) -> Result<DatasetManifest> {
    let mask_files = list_nifti(masks)?;
    let mut cases = Vec::new();
    let mut domains: Vec<String> = Vec::new();
    for (stem, img) in list_nifti(images)? {
        let Some((_, mpath)) = mask_files
            .iter()
            .find(|(m, p)| m.starts_with(&stem) && p != &img)
        else {
            return Err(StudyError::invalid(format!("no mask for {}", img.display())));
        };
        let volume = read_nifti(&img)?.to_volume()?;
        let mask = read_nifti(mpath)?.to_mask()?;
        if volume.shape() != mask.shape() {
            return Err(StudyError::format(mpath, format!("shape {:?} differs from image {:?}", mask.shape(), volume.shape())));
        }
        let d = domain.map(str::to_string).unwrap_or_else(|| domain_from_stem(&stem));
        if !domains.contains(&d) {
            domains.push(d.clone());
        }
        let volume_path = format!("{d}/{stem}_image.json");
        let mask_path = format!("{d}/{stem}_mask.json");
        io::write_volume(&out.join(&volume_path), &volume)?;
        io::write_mask(&out.join(&mask_path), &mask)?;
        cases.push(CaseEntry {
            id: stem,
            domain: d,
            volume_path,
            mask_path,
        });
    }
    if cases.is_empty() {
        return Err(StudyError::invalid(format!("no .nii or .nii.gz files in {}", images.display())));
    }
    domains.sort();
    let m = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        domains,
        cases,
    };
    m.save(&out.join("dataset.json"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use std::io::Write;

    #[test]
    fn float_round_trip_and_axis_order() {
        let shape = [3, 2, 2];
        let data: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let img = decode_nifti(&encode_nifti(shape, [1.0, 2.0, 3.0], &data)).unwrap();
        assert_eq!(img.spacing, [1.0, 2.0, 3.0]);
        let v = img.to_volume().unwrap();
        // first axis fastest in the file
        assert_eq!(v.get(1, 0, 0), 1.0);
        assert_eq!(v.get(0, 1, 0), 3.0);
        assert_eq!(v.get(0, 0, 1), 6.0);
    }

    #[test]
    fn int16_with_scaling_and_gzip() {
        let mut b = encode_nifti([2, 1, 1], [1.0; 3], &[]);
        b[70..72].copy_from_slice(&4i16.to_le_bytes());
        b[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        b[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        b.extend_from_slice(&(-3i16).to_le_bytes());
        b.extend_from_slice(&5i16.to_le_bytes());
        let mut gz = GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&b).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.nii.gz");
        fs::write(&p, gz.finish().unwrap()).unwrap();
        assert_eq!(read_nifti(&p).unwrap().data, vec![-5.0, 11.0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_nifti(&[0u8; 10]).is_err());
        assert!(decode_nifti(&[0u8; 400]).is_err());
        let mut b = encode_nifti([2, 2, 2], [1.0; 3], &[0.0; 8]);
        b.truncate(b.len() - 4);
        assert!(decode_nifti(&b).is_err());
    }

    #[test]
    fn domain_labels() {
        assert_eq!(domain_from_stem("CC0001_philips_15_55_M"), "philips_15");
        assert_eq!(domain_from_stem("scan"), "default");
    }
}
