//! Fine-tuning strategies and target-data availability levels.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use layershift_core::io::LoadedCase;
use layershift_core::rng::{derive_str, seeded};
use layershift_nn::{GroupName, SegmentationModel, TrainConfig, TrainHistory, TrainSlice};

use crate::error::{Result, StudyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    AllLayers,
    FirstLayers,
    LastLayers,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::AllLayers, Strategy::FirstLayers, Strategy::LastLayers];

    pub fn group(self) -> GroupName {
        match self {
            Strategy::AllLayers => GroupName::All,
            Strategy::FirstLayers => GroupName::First,
            Strategy::LastLayers => GroupName::Last,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::AllLayers => "all_layers",
            Strategy::FirstLayers => "first_layers",
            Strategy::LastLayers => "last_layers",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = StudyError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                StudyError::schema(
                    "strategy",
                    format!("unknown strategy {s:?}; expected all_layers, first_layers or last_layers"),
                )
            })
    }
}

/// Marks exactly the strategy's layer group as trainable.
pub fn apply_strategy<T: layershift_nn::Scalar>(model: &mut SegmentationModel<T>, s: Strategy) {
    model.train_only(s.group());
}

/// Fractions of one scan's axial slices used in the original protocol.
pub const PAPER_FRACTIONS: [(u32, u32); 7] = [(1, 2), (1, 3), (1, 6), (1, 12), (1, 24), (1, 36), (1, 48)];

/// Amount of annotated target data: whole scans, or an evenly strided
/// fraction of one scan.
///
/// Text form: `"3 scans"`, `"1 scan"`, or an exact rational such as `"1/12"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AvailabilityLevel {
    Scans(u32),
    Fraction { num: u32, den: u32 },
}

impl AvailabilityLevel {
    pub fn fraction(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(StudyError::schema(
                "availability",
                format!("fraction {num}/{den} must lie in (0, 1]"),
            ));
        }
        let g = gcd(num, den);
        Ok(AvailabilityLevel::Fraction {
            num: num / g,
            den: den / g,
        })
    }

    /// The default ladder: 3 scans, 1 scan and the seven slice fractions.
    pub fn paper_levels() -> Vec<AvailabilityLevel> {
        let mut v = vec![AvailabilityLevel::Scans(3), AvailabilityLevel::Scans(1)];
        v.extend(PAPER_FRACTIONS.iter().map(|&(n, d)| AvailabilityLevel::Fraction { num: n, den: d }));
        v
    }

    /// Amount of data in units of one scan.
    pub fn amount(self) -> f64 {
        match self {
            AvailabilityLevel::Scans(k) => k as f64,
            AvailabilityLevel::Fraction { num, den } => num as f64 / den as f64,
        }
    }

    pub fn scans_needed(self) -> usize {
        match self {
            AvailabilityLevel::Scans(k) => k as usize,
            AvailabilityLevel::Fraction { .. } => 1,
        }
    }

    /// Slice stride for fractions: `round(den / num)`.
    pub fn stride(self) -> usize {
        match self {
            AvailabilityLevel::Scans(_) => 1,
            AvailabilityLevel::Fraction { num, den } => ((2 * den + num) / (2 * num)).max(1) as usize,
        }
    }

    /// File-name friendly form.
    pub fn slug(self) -> String {
        match self {
            AvailabilityLevel::Scans(k) => format!("scans_{k}"),
            AvailabilityLevel::Fraction { num, den } => format!("frac_{num}_{den}"),
        }
    }
}

/// Sorts from most to least data.
pub fn sort_levels(levels: &mut [AvailabilityLevel]) {
    levels.sort_by(|a, b| b.amount().total_cmp(&a.amount()));
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for AvailabilityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AvailabilityLevel::Scans(1) => f.write_str("1 scan"),
            AvailabilityLevel::Scans(k) => write!(f, "{k} scans"),
            AvailabilityLevel::Fraction { num, den } => write!(f, "{num}/{den}"),
        }
    }
}

impl FromStr for AvailabilityLevel {
    type Err = StudyError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            StudyError::schema(
                "availability",
                format!("cannot parse {s:?}; expected \"<k> scans\" or a fraction like \"1/12\""),
            )
        };
        let t = s.trim();
        if let Some((n, d)) = t.split_once('/') {
            let num = n.trim().parse().map_err(|_| bad())?;
            let den = d.trim().parse().map_err(|_| bad())?;
            return AvailabilityLevel::fraction(num, den);
        }
        let count = t
            .strip_suffix("scans")
            .or_else(|| t.strip_suffix("scan"))
            .ok_or_else(bad)?;
        let k: u32 = count.trim().parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(StudyError::schema("availability", "scan count must be >= 1"));
        }
        Ok(AvailabilityLevel::Scans(k))
    }
}

impl Serialize for AvailabilityLevel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AvailabilityLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Axial indices kept from a scan with `n_total` slices.
pub fn subsample_slices(n_total: usize, level: AvailabilityLevel) -> Vec<usize> {
    (0..n_total).step_by(level.stride()).collect()
}

/// Scans and slices chosen for one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub scans: Vec<String>,
    /// `(index into the pool, axial index)` pairs.
    pub slices: Vec<(usize, usize)>,
}

/// Draws the scans for `level` from `pool` with a seeded generator, then
/// subsamples their axial slices.
pub fn select_slices(pool: &[LoadedCase], level: AvailabilityLevel, seed: u64) -> Result<Selection> {
    let k = level.scans_needed();
    if pool.len() < k {
        return Err(StudyError::invalid(format!(
            "level {level} needs {k} scans but the adaptation pool holds {}",
            pool.len()
        )));
    }
    let mut rng = seeded(derive_str(seed, "scan-choice"));
    let mut picked = sample(&mut rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    let mut slices = Vec::new();
    for &i in &picked {
        let nz = pool[i].volume.shape()[2];
        slices.extend(subsample_slices(nz, level).into_iter().map(|z| (i, z)));
    }
    if slices.is_empty() {
        return Err(StudyError::invalid(format!("level {level} selects no slices")));
    }
    Ok(Selection {
        scans: picked.iter().map(|&i| pool[i].id.clone()).collect(),
        slices,
    })
}

/// Axial training slices of `case` at the given indices.
pub fn training_slices(case: &LoadedCase, indices: impl IntoIterator<Item = usize>) -> Result<Vec<TrainSlice>> {
    indices
        .into_iter()
        .map(|z| {
            Ok(TrainSlice::new(
                case.volume.extract_axial_slice(z)?,
                case.mask.extract_axial_slice(z)?,
            )?)
        })
        .collect()
}

pub struct FineTuned {
    pub model: SegmentationModel<f32>,
    pub history: TrainHistory,
    pub selection: Selection,
}

/// Subsamples the target pool, freezes everything outside the strategy's
/// group and trains with `config`. `seed` drives both the scan choice and
/// the optimization.
pub fn finetune(
    pretrained: &SegmentationModel<f32>,
    pool: &[LoadedCase],
    strategy: Strategy,
    level: AvailabilityLevel,
    config: &TrainConfig,
    seed: u64,
) -> Result<FineTuned> {
    let selection = select_slices(pool, level, seed)?;
    let mut data = Vec::with_capacity(selection.slices.len());
    for &(i, z) in &selection.slices {
        data.extend(training_slices(&pool[i], [z])?);
    }
    let mut model = pretrained.clone();
    apply_strategy(&mut model, strategy);
    let config = TrainConfig {
        seed: derive_str(seed, "finetune"),
        ..config.clone()
    };
    let history = layershift_nn::train(&mut model, &data, &config)?;
    Ok(FineTuned {
        model,
        history,
        selection,
    })
}

/// Provenance written next to every adapted checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_domain: String,
    pub target_domain: String,
    pub strategy: Strategy,
    pub availability: AvailabilityLevel,
    pub seed: u64,
    pub base_checkpoint_hash: String,
    pub scans: Vec<String>,
    pub slices: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_rule() {
        assert_eq!(subsample_slices(10, AvailabilityLevel::fraction(1, 3).unwrap()), vec![0, 3, 6, 9]);
        assert_eq!(subsample_slices(10, AvailabilityLevel::fraction(1, 1).unwrap()), (0..10).collect::<Vec<_>>());
        assert_eq!(subsample_slices(100, AvailabilityLevel::fraction(1, 48).unwrap()), vec![0, 48, 96]);
        assert_eq!(subsample_slices(5, AvailabilityLevel::Scans(1)), vec![0, 1, 2, 3, 4]);
        // 2/5 rounds 2.5 up
        assert_eq!(AvailabilityLevel::fraction(2, 5).unwrap().stride(), 3);
        assert_eq!(AvailabilityLevel::fraction(2, 4).unwrap(), AvailabilityLevel::Fraction { num: 1, den: 2 });
    }

    #[test]
    fn level_text_round_trip() {
        for l in AvailabilityLevel::paper_levels() {
            let s = l.to_string();
            assert_eq!(s.parse::<AvailabilityLevel>().unwrap(), l);
            let j = serde_json::to_string(&l).unwrap();
            assert_eq!(serde_json::from_str::<AvailabilityLevel>(&j).unwrap(), l);
        }
        assert_eq!("1 scan".parse::<AvailabilityLevel>().unwrap(), AvailabilityLevel::Scans(1));
        for bad in ["0 scans", "3/2", "0/4", "half", "1/x"] {
            assert!(bad.parse::<AvailabilityLevel>().is_err(), "{bad}");
        }
    }

    #[test]
    fn levels_sort_by_amount() {
        let mut v = vec![
            AvailabilityLevel::fraction(1, 12).unwrap(),
            AvailabilityLevel::Scans(1),
            AvailabilityLevel::fraction(1, 2).unwrap(),
            AvailabilityLevel::Scans(3),
        ];
        sort_levels(&mut v);
        assert_eq!(v.iter().map(|l| l.to_string()).collect::<Vec<_>>(), ["3 scans", "1 scan", "1/2", "1/12"]);
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        let e = "middle_layers".parse::<Strategy>().unwrap_err().to_string();
        assert!(e.contains("middle_layers"));
    }
}
