//! Loading cases from a dataset manifest into canonical form.

use std::path::Path;

use sha2::{Digest, Sha256};

use layershift_core::io::{self, DatasetManifest, LoadedCase};

use crate::error::{Result, StudyError};

/// Isotropic target spacing in mm.
pub const CANONICAL_SPACING: [f64; 3] = [1.0; 3];

/// Resamples to 1 mm isotropic (trilinear for intensities, nearest for the
/// mask) and rescales intensities to `[0, 1]`.
pub fn preprocess(case: LoadedCase) -> Result<LoadedCase> {
    let (volume, mask) = if case.volume.spacing() == CANONICAL_SPACING {
        (case.volume, case.mask)
    } else {
        (
            case.volume.resample_to_isotropic(CANONICAL_SPACING)?,
            case.mask.resample_to_isotropic(CANONICAL_SPACING)?,
        )
    };
    Ok(LoadedCase {
        volume: volume.rescale_intensity()?,
        mask,
        ..case
    })
}

/// A domain's cases, sorted by id and preprocessed.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub name: String,
    pub cases: Vec<LoadedCase>,
    /// Hash over the domain's case ids and file contents.
    pub content_hash: String,
}

impl DomainData {
    pub fn load(dataset: &Path, domain: &str) -> Result<Self> {
        let manifest = DatasetManifest::load(dataset)?;
        let root = dataset.parent().unwrap_or(Path::new("."));
        let mut entries: Vec<_> = manifest.cases_in(domain).cloned().collect();
        if entries.is_empty() {
            return Err(StudyError::invalid(format!("domain {domain} has no cases in {}", dataset.display())));
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let mut h = Sha256::new();
        let mut cases = Vec::with_capacity(entries.len());
        for e in &entries {
            h.update(e.id.as_bytes());
            for p in [&e.volume_path, &e.mask_path] {
                let header = root.join(p);
                for f in [header.clone(), io::payload_path(&header)] {
                    let bytes = std::fs::read(&f).map_err(|err| StudyError::io(&f, err))?;
                    h.update((bytes.len() as u64).to_le_bytes());
                    h.update(&bytes);
                }
            }
            cases.push(preprocess(io::load_case(root, e)?)?);
        }
        Ok(DomainData {
            name: domain.to_string(),
            cases,
            content_hash: hex::encode(h.finalize()),
        })
    }

    /// First `pool` cases for adaptation, the rest for testing.
    pub fn split(&self, pool: usize) -> (&[LoadedCase], &[LoadedCase]) {
        self.cases.split_at(pool.min(self.cases.len()))
    }
}
