//! Experiment manifests and named configuration profiles.
//!
//! A manifest is JSON:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "dataset": "data/dataset.json",
//!   "domains": ["A", "C"],
//!   "profile": "desk",
//!   "strategies": ["all_layers", "first_layers", "last_layers"],
//!   "levels": ["1 scan", "1/4", "1/8"],
//!   "seeds": [0, 1, 2, 3, 4],
//!   "out": "runs/ac"
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Omitted fields
//! take the defaults listed on [`ExperimentManifest`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use layershift_core::io::DatasetManifest;
use layershift_nn::{LossKind, ModelSpec, TrainConfig, Variant};

use crate::adaptation::{AvailabilityLevel, Strategy};
use crate::error::{Result, StudyError};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    Paper,
    #[default]
    Desk,
}

impl FromStr for ProfileName {
    type Err = StudyError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ProfileName::Paper),
            "desk" => Ok(ProfileName::Desk),
            _ => Err(StudyError::schema("profile", format!("unknown profile {s:?}; expected paper or desk"))),
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileName::Paper => "paper",
            ProfileName::Desk => "desk",
        })
    }
}

/// Model, schedules and inference settings for one profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: ProfileName,
    pub model: ModelSpec,
    pub source: TrainConfig,
    pub finetune: TrainConfig,
    pub inference_batch: usize,
}

impl Profile {
    pub fn named(name: ProfileName) -> Self {
        match name {
            ProfileName::Paper => Profile {
                name,
                model: ModelSpec::default(),
                source: TrainConfig::paper_source(),
                finetune: TrainConfig::paper_finetune(),
                inference_batch: 32,
            },
            ProfileName::Desk => Profile {
                name,
                model: ModelSpec::new(Variant::ResidualUnet, 3, 8),
                source: TrainConfig::desk_source(),
                finetune: TrainConfig::desk_finetune(),
                inference_batch: 16,
            },
        }
    }
}

/// Optional replacements for individual schedule fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverride {
    pub epochs: Option<usize>,
    pub iterations_per_epoch: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_initial: Option<f64>,
    pub lr_reduced: Option<f64>,
    pub lr_drop_epoch: Option<usize>,
    pub momentum: Option<f64>,
    pub crop_size: Option<(usize, usize)>,
    pub augment: Option<bool>,
    pub loss: Option<LossKind>,
}

impl ConfigOverride {
    pub fn apply(&self, c: &TrainConfig) -> TrainConfig {
        let mut c = c.clone();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(epochs, iterations_per_epoch, batch_size, lr_initial, lr_reduced, lr_drop_epoch, momentum, crop_size, augment, loss);
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub source: ConfigOverride,
    #[serde(default)]
    pub finetune: ConfigOverride,
    #[serde(default)]
    pub inference_batch: Option<usize>,
}

/// Declarative description of a study.
///
/// Defaults: `profile` desk, `strategies` all three, `levels` 3 scans, 1 scan
/// and the seven slice fractions, `seed` 0, `folds` 3, `tolerance_mm` 1.0,
/// `out` `"out"`. `dataset`, `domains` and `seeds` are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub dataset: PathBuf,
    pub domains: Vec<String>,
    #[serde(default)]
    pub profile: ProfileName,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "AvailabilityLevel::paper_levels")]
    pub levels: Vec<AvailabilityLevel>,
    /// Fine-tuning seeds; one run per (pair, strategy, level, seed).
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Seed for source training, fold assignment and oracle training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "three")]
    pub folds: usize,
    #[serde(default = "one_mm")]
    pub tolerance_mm: f64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn schema_version() -> u32 {
    MANIFEST_SCHEMA_VERSION
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn three() -> usize {
    3
}

fn one_mm() -> f64 {
    1.0
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentManifest {
    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StudyError::io(path, e))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.dataset = base.join(&m.dataset);
        m.out = base.join(&m.out);
        m.validate()?;
        Ok(m)
    }

    /// Parses without touching the file system. Schema errors name the
    /// offending field.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            StudyError::schema(field, e.into_inner().to_string())
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(StudyError::schema(
                "schema_version",
                format!("unsupported version {}", self.schema_version),
            ));
        }
        if self.seeds.is_empty() {
            return Err(StudyError::schema("seeds", "seeds nonempty"));
        }
        if self.domains.len() < 2 {
            return Err(StudyError::schema("domains", "at least 2 domains"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(d) = self.domains.iter().find(|d| !seen.insert(*d)) {
            return Err(StudyError::schema("domains", format!("duplicate domain {d}")));
        }
        if self.strategies.is_empty() {
            return Err(StudyError::schema("strategies", "strategies nonempty"));
        }
        if self.levels.is_empty() {
            return Err(StudyError::schema("levels", "levels nonempty"));
        }
        if self.folds < 2 {
            return Err(StudyError::schema("folds", "folds >= 2"));
        }
        if !(self.tolerance_mm.is_finite() && self.tolerance_mm >= 0.0) {
            return Err(StudyError::schema("tolerance_mm", "tolerance_mm >= 0"));
        }
        let profile = self.profile();
        profile.model.validate().map_err(|e| StudyError::schema("overrides.model", e.to_string()))?;
        profile.source.validate().map_err(|e| StudyError::schema("overrides.source", e.to_string()))?;
        profile.finetune.validate().map_err(|e| StudyError::schema("overrides.finetune", e.to_string()))?;
        if profile.inference_batch == 0 {
            return Err(StudyError::schema("overrides.inference_batch", "inference_batch >= 1"));
        }
        if !self.dataset.is_file() {
            return Err(StudyError::MissingFile(self.dataset.clone()));
        }
        let ds = DatasetManifest::load(&self.dataset)?;
        let root = self.dataset.parent().unwrap_or(Path::new("."));
        for d in &self.domains {
            if !ds.domains.contains(d) {
                return Err(StudyError::schema("domains", format!("domain {d} not in {}", self.dataset.display())));
            }
            let n = ds.cases_in(d).count();
            let need = self.folds.max(self.pool_size() + 1);
            if n < need {
                return Err(StudyError::schema(
                    "domains",
                    format!("domain {d} has {n} cases; the manifest needs at least {need}"),
                ));
            }
        }
        for c in ds.cases.iter().filter(|c| self.domains.contains(&c.domain)) {
            for p in [&c.volume_path, &c.mask_path] {
                let full = root.join(p);
                if !full.is_file() {
                    return Err(StudyError::MissingFile(full));
                }
            }
        }
        Ok(())
    }

    /// Named profile with the manifest's overrides applied.
    pub fn profile(&self) -> Profile {
        let mut p = Profile::named(self.profile);
        if let Some(m) = &self.overrides.model {
            p.model = m.clone();
        }
        p.source = self.overrides.source.apply(&p.source);
        p.finetune = self.overrides.finetune.apply(&p.finetune);
        if let Some(b) = self.overrides.inference_batch {
            p.inference_batch = b;
        }
        p
    }

    /// Target scans set aside for adaptation: the largest scan count any
    /// level asks for. The remaining cases form the target test set.
    pub fn pool_size(&self) -> usize {
        self.levels.iter().map(|l| l.scans_needed()).max().unwrap_or(1)
    }

    /// Manifest with defaults filled in, as pretty JSON.
    pub fn resolved_json(&self) -> String {
        #[derive(Serialize)]
        struct Resolved<'a> {
            #[serde(flatten)]
            manifest: &'a ExperimentManifest,
            resolved_profile: Profile,
        }
        let mut s = serde_json::to_string_pretty(&Resolved {
            manifest: self,
            resolved_profile: self.profile(),
        })
        .expect("manifest serializes");
        s.push('\n');
        s
    }
}
