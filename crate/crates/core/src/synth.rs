//! Synthetic head phantoms and intensity-shifted domains.
//!
//! A phantom is an ellipsoidal "brain" (the ground-truth mask) with a
//! grey/white two-tissue texture, wrapped in a thin dark CSF layer and a
//! bright skull shell on a dark background. Domains differ only in how
//! intensities are remapped: contrast stretch about 0.5, a power law, a smooth
//! multiplicative bias field and additive Gaussian noise, followed by min-max
//! rescaling. Geometry and masks are never touched by a domain.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, CaseEntry, DatasetManifest, DATASET_SCHEMA_VERSION};
use crate::par;
use crate::rng::{derive, derive_str, seeded};
use crate::volume::{Geometry, Mask, Volume};

pub const MIN_PHANTOM_EXTENT: usize = 16;

const BACKGROUND: f64 = 0.02;
const CSF: f64 = 0.12;
const SKULL: f64 = 0.85;
const GREY: f64 = 0.45;
const WHITE: f64 = 0.68;
const CSF_MM: f64 = 1.5;
const SKULL_MM: f64 = 3.0;
const CORTEX_MM: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub name: String,
    /// Exponent of the monotone power-law remap.
    pub gamma: f64,
    /// Strength of the smooth multiplicative field, `field = 1 + a * B(p)` with `|B| <= 1`.
    pub bias_amplitude: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Multiplier of intensity differences about 0.5.
    pub contrast_scale: f64,
    pub seed: u64,
}

impl DomainParams {
    pub fn identity(name: &str) -> Self {
        DomainParams {
            name: name.into(),
            gamma: 1.0,
            bias_amplitude: 0.0,
            noise_sigma: 0.0,
            contrast_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.gamma, self.bias_amplitude, self.noise_sigma, self.contrast_scale]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!("domain {}: parameters must be finite", self.name)));
        }
        if self.gamma <= 0.0 || self.contrast_scale <= 0.0 {
            return Err(Error::invalid(format!(
                "domain {}: gamma and contrast_scale must be > 0",
                self.name
            )));
        }
        if self.bias_amplitude < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::invalid(format!(
                "domain {}: bias_amplitude and noise_sigma must be >= 0",
                self.name
            )));
        }
        Ok(())
    }
}

/// Three domains: a near-identity reference `A`, a gamma + bias shift `B` and
/// a strong contrast shift `C` that pushes white matter toward skull brightness.
pub fn default_domains() -> Vec<DomainParams> {
    vec![
        DomainParams {
            name: "A".into(),
            gamma: 1.0,
            bias_amplitude: 0.05,
            noise_sigma: 0.01,
            contrast_scale: 1.0,
            seed: 11,
        },
        DomainParams {
            name: "B".into(),
            gamma: 2.0,
            bias_amplitude: 0.3,
            noise_sigma: 0.02,
            contrast_scale: 1.0,
            seed: 23,
        },
        DomainParams {
            name: "C".into(),
            gamma: 0.5,
            bias_amplitude: 0.15,
            noise_sigma: 0.02,
            contrast_scale: 2.0,
            seed: 37,
        },
    ]
}

pub const DEFAULT_SHAPE: [usize; 3] = [64, 64, 32];
pub const DEFAULT_CASES_PER_DOMAIN: usize = 8;

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub volume: Volume,
    pub mask: Mask,
    pub case_id: String,
    pub domain_name: String,
    /// Per-case seed; domain noise and bias phases derive from it.
    pub seed: u64,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalised radius of `p` against the ellipsoid grown by `grow` mm.
    fn rho(&self, p: [f64; 3], grow: f64) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / (self.radii[a] + grow)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

struct Wave {
    k: [f64; 3],
    phase: f64,
}

fn random_waves<R: Rng + ?Sized>(rng: &mut R, n: usize, wavelength: (f64, f64)) -> Vec<Wave> {
    (0..n)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let cz: f64 = rng.random_range(-1.0..1.0);
            let sz = (1.0 - cz * cz).sqrt();
            let lambda = rng.random_range(wavelength.0..wavelength.1);
            let w = std::f64::consts::TAU / lambda;
            Wave {
                k: [w * sz * theta.cos(), w * sz * theta.sin(), w * cz],
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect()
}

fn wave_sum(waves: &[Wave], p: [f64; 3]) -> f64 {
    waves
        .iter()
        .map(|w| (w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase).sin())
        .sum::<f64>()
        / waves.len() as f64
}

/// Generates one phantom before any domain shift. The result is already
/// scaled to `[0, 1]`.
pub fn make_phantom<R: Rng + ?Sized>(rng: &mut R, geometry: Geometry) -> Result<SyntheticCase> {
    geometry.validate()?;
    if geometry.shape.iter().any(|&n| n < MIN_PHANTOM_EXTENT) {
        return Err(Error::invalid(format!(
            "phantom shape must be >= {MIN_PHANTOM_EXTENT} per axis, got {:?}",
            geometry.shape
        )));
    }
    let seed = rng.random::<u64>();
    let extent: Vec<f64> = (0..3)
        .map(|a| (geometry.shape[a] - 1) as f64 * geometry.spacing[a])
        .collect();
    let mut center = [0.0; 3];
    let mut radii = [0.0; 3];
    let radius_frac = [(0.28, 0.36), (0.30, 0.38), (0.28, 0.34)];
    for a in 0..3 {
        let full = geometry.shape[a] as f64 * geometry.spacing[a];
        center[a] = extent[a] / 2.0 + rng.random_range(-0.04..0.04) * full;
        radii[a] = rng.random_range(radius_frac[a].0..radius_frac[a].1) * full;
        // keep the skull shell inside the grid
        let room = center[a].min(extent[a] - center[a]) - CSF_MM - SKULL_MM - geometry.spacing[a];
        radii[a] = radii[a].min(room).max(2.0 * geometry.spacing[a]);
    }
    let brain = Ellipsoid { center, radii };
    let texture = random_waves(rng, 3, (8.0, 14.0));
    let noise = Normal::new(0.0, 0.015).expect("valid sigma");

    let mut values = Vec::with_capacity(geometry.len());
    let mut labels = Vec::with_capacity(geometry.len());
    for i in 0..geometry.len() {
        let p = geometry.position(geometry.coords(i));
        let rho = brain.rho(p, 0.0);
        let (v, inside) = if rho <= 1.0 {
            let cortex = brain.rho(p, -CORTEX_MM) > 1.0;
            let v = if cortex || wave_sum(&texture, p) > 0.45 { GREY } else { WHITE };
            (v, true)
        } else if brain.rho(p, CSF_MM) <= 1.0 {
            (CSF, false)
        } else if brain.rho(p, CSF_MM + SKULL_MM) <= 1.0 {
            (SKULL, false)
        } else {
            (BACKGROUND, false)
        };
        values.push((v + noise.sample(rng)) as f32);
        labels.push(inside as u8);
    }
    let volume = Volume::new(geometry, values)?.rescale_intensity()?;
    let mask = Mask::new(geometry, labels)?;
    Ok(SyntheticCase {
        volume,
        mask,
        case_id: format!("phantom_{seed:016x}"),
        domain_name: String::new(),
        seed,
    })
}

/// Contrast stretch about 0.5 (clamped to `[0, 1]`) followed by the power law.
pub fn tone_curve(v: f64, d: &DomainParams) -> f64 {
    (0.5 + d.contrast_scale * (v - 0.5)).clamp(0.0, 1.0).powf(d.gamma)
}

/// Remaps intensities of `case` into domain `d`. Deterministic in
/// `(case.seed, d.seed)`.
pub fn apply_domain(case: &SyntheticCase, d: &DomainParams) -> Result<SyntheticCase> {
    d.validate()?;
    let g = *case.volume.geometry();
    let mut rng = seeded(derive(case.seed, d.seed));
    let span: f64 = (0..3)
        .map(|a| g.shape[a] as f64 * g.spacing[a])
        .fold(0.0, f64::max);
    let field = random_waves(&mut rng, 3, (1.5 * span, 2.5 * span));
    let noise = if d.noise_sigma > 0.0 {
        Some(Normal::new(0.0, d.noise_sigma).expect("valid sigma"))
    } else {
        None
    };
    let mut out = Vec::with_capacity(g.len());
    for (i, &v) in case.volume.data().iter().enumerate() {
        let mut x = tone_curve(v as f64, d);
        if d.bias_amplitude > 0.0 {
            let p = g.position(g.coords(i));
            x *= (1.0 + d.bias_amplitude * wave_sum(&field, p)).max(0.05);
        }
        if let Some(n) = &noise {
            x += n.sample(&mut rng);
        }
        out.push(x.max(0.0) as f32);
    }
    Ok(SyntheticCase {
        volume: Volume::new(g, out)?.rescale_intensity()?,
        mask: case.mask.clone(),
        case_id: case.case_id.clone(),
        domain_name: d.name.clone(),
        seed: case.seed,
    })
}

/// Per-case phantom seed inside a benchmark.
pub fn case_seed(benchmark_seed: u64, domain: &str, index: usize) -> u64 {
    derive(derive_str(benchmark_seed, domain), index as u64)
}

/// Generates every case of a benchmark in memory, in manifest order.
pub fn generate_cases(
    domains: &[DomainParams],
    cases_per_domain: usize,
    geometry: Geometry,
    seed: u64,
) -> Result<Vec<SyntheticCase>> {
    if domains.len() < 2 {
        return Err(Error::invalid("a benchmark needs at least 2 domains"));
    }
    if cases_per_domain == 0 {
        return Err(Error::invalid("cases_per_domain must be >= 1"));
    }
    for (i, d) in domains.iter().enumerate() {
        d.validate()?;
        if domains[..i].iter().any(|o| o.name == d.name) {
            return Err(Error::invalid(format!("duplicate domain name {}", d.name)));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..domains.len())
        .flat_map(|d| (0..cases_per_domain).map(move |c| (d, c)))
        .collect();
    par::map_slice(&jobs, |&(di, ci)| {
        let d = &domains[di];
        let mut rng = seeded(case_seed(seed, &d.name, ci));
        let mut case = apply_domain(&make_phantom(&mut rng, geometry)?, d)?;
        case.case_id = format!("{}_{ci:03}", d.name);
        Ok(case)
    })
    .into_iter()
    .collect()
}

/// Writes a benchmark under `out_dir` and returns its manifest, which is
/// also saved as `out_dir/dataset.json`.
pub fn build_benchmark(
    domains: &[DomainParams],
    cases_per_domain: usize,
    geometry: Geometry,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let cases = generate_cases(domains, cases_per_domain, geometry, seed)?;
    let mut entries = Vec::with_capacity(cases.len());
    for case in &cases {
        let volume_path = format!("{}/{}_image.json", case.domain_name, case.case_id);
        let mask_path = format!("{}/{}_mask.json", case.domain_name, case.case_id);
        io::write_volume(&out_dir.join(&volume_path), &case.volume)?;
        io::write_mask(&out_dir.join(&mask_path), &case.mask)?;
        entries.push(CaseEntry {
            id: case.case_id.clone(),
            domain: case.domain_name.clone(),
            volume_path,
            mask_path,
        });
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        domains: domains.iter().map(|d| d.name.clone()).collect(),
        cases: entries,
    };
    manifest.save(&out_dir.join("dataset.json"))?;
    Ok(manifest)
}
