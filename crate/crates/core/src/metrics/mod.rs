//! Overlap metrics between binary masks.
//!
//! Surfaces are the foreground voxels with at least one 6-connected neighbour
//! that is background or outside the array; each contributes its voxel-center
//! position in mm. Surface Dice counts surface points of either mask lying
//! within `tolerance_mm` of the other surface:
//!
//! ```text
//! (|{p in Sa : d(p, Sb) <= t}| + |{q in Sb : d(q, Sa) <= t}|) / (|Sa| + |Sb|)
//! ```
//!
//! Distances are looked up in an exact Euclidean distance transform of each
//! surface instead of scanning all point pairs.

mod edt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Mask};

pub use edt::squared_distance_to_sites;

/// Surface Dice tolerance used throughout the experiments.
pub const DEFAULT_TOLERANCE_MM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Dice,
    SurfaceDice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: MetricName,
    pub value: f64,
    pub tolerance_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
}

impl SurfacePointSet {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_pair(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !a.same_grid(b) {
        return Err(Error::invalid(format!(
            "mask spacings differ: {:?} vs {:?}",
            a.spacing(),
            b.spacing()
        )));
    }
    Ok(())
}

/// Volumetric Dice `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<MetricResult> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as u64;
        nb += y as u64;
        inter += (x & y) as u64;
    }
    let value = if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    };
    Ok(MetricResult {
        metric: MetricName::Dice,
        value,
        tolerance_mm: None,
    })
}

/// Linear indices of surface voxels, in ascending order.
pub fn surface_voxels(m: &Mask) -> Vec<usize> {
    let [nx, ny, nz] = m.shape();
    let data = m.data();
    let g = m.geometry();
    let mut out = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let i = g.index(x, y, z);
                if data[i] == 0 {
                    continue;
                }
                let border = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || data[g.index(x - 1, y, z)] == 0
                    || data[g.index(x + 1, y, z)] == 0
                    || data[g.index(x, y - 1, z)] == 0
                    || data[g.index(x, y + 1, z)] == 0
                    || data[i - 1] == 0
                    || data[i + 1] == 0;
                if border {
                    out.push(i);
                }
            }
        }
    }
    out
}

pub fn extract_surface(m: &Mask) -> SurfacePointSet {
    let g = m.geometry();
    SurfacePointSet {
        points: surface_voxels(m)
            .into_iter()
            .map(|i| g.position(g.coords(i)))
            .collect(),
    }
}

fn sites_grid(g: &Geometry, voxels: &[usize]) -> Vec<bool> {
    let mut sites = vec![false; g.len()];
    for &i in voxels {
        sites[i] = true;
    }
    sites
}

fn count_within(dist2: &[f64], points: &[usize], tolerance_mm: f64) -> usize {
    points
        .iter()
        .filter(|&&i| dist2[i].sqrt() <= tolerance_mm)
        .count()
}

/// Surface Dice at `tolerance_mm`. Both surfaces empty scores 1, exactly one
/// empty scores 0.
pub fn surface_dice(a: &Mask, b: &Mask, tolerance_mm: f64) -> Result<MetricResult> {
    check_pair(a, b)?;
    if !(tolerance_mm >= 0.0 && tolerance_mm.is_finite()) {
        return Err(Error::invalid(format!(
            "tolerance must be finite and >= 0, got {tolerance_mm}"
        )));
    }
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    let value = match (sa.is_empty(), sb.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => {
            let g = a.geometry();
            let db = squared_distance_to_sites(&g, &sites_grid(&g, &sb));
            let da = squared_distance_to_sites(&g, &sites_grid(&g, &sa));
            let matched = count_within(&db, &sa, tolerance_mm) + count_within(&da, &sb, tolerance_mm);
            matched as f64 / (sa.len() + sb.len()) as f64
        }
    };
    Ok(MetricResult {
        metric: MetricName::SurfaceDice,
        value,
        tolerance_mm: Some(tolerance_mm),
    })
}
