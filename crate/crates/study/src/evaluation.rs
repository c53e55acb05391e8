//! Oracle and baseline protocol, gap closure, sign tests and aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use layershift_core::rng::seeded;
use layershift_core::stats::{paired_sign_test_keyed, SignTest, Side};

use crate::adaptation::{sort_levels, AvailabilityLevel, Strategy};
use crate::error::{Result, StudyError};

/// Default guard for the gap-closure denominator.
pub const GAP_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    Baseline,
    AllLayers,
    FirstLayers,
    LastLayers,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Baseline => "baseline",
            Method::AllLayers => "all_layers",
            Method::FirstLayers => "first_layers",
            Method::LastLayers => "last_layers",
        }
    }

    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Method::AllLayers => Some(Strategy::AllLayers),
            Method::FirstLayers => Some(Strategy::FirstLayers),
            Method::LastLayers => Some(Strategy::LastLayers),
            _ => None,
        }
    }
}

impl From<Strategy> for Method {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::AllLayers => Method::AllLayers,
            Strategy::FirstLayers => Method::FirstLayers,
            Strategy::LastLayers => Method::LastLayers,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub source_domain: String,
    pub target_domain: String,
    pub method: Method,
    pub availability: Option<AvailabilityLevel>,
    pub case_id: String,
    pub surface_dice: f64,
    pub dice: f64,
    pub seed: u64,
}

impl ScoreRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("surface_dice", self.surface_dice), ("dice", self.dice)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(StudyError::invalid(format!("{name} {v} outside [0, 1] for case {}", self.case_id)));
            }
        }
        if self.method == Method::Oracle && self.source_domain != self.target_domain {
            return Err(StudyError::invalid(format!(
                "oracle record for case {} crosses domains {} -> {}",
                self.case_id, self.source_domain, self.target_domain
            )));
        }
        if self.method.strategy().is_some() != self.availability.is_some() {
            return Err(StudyError::invalid(format!(
                "case {}: availability must be set exactly for fine-tuning methods",
                self.case_id
            )));
        }
        Ok(())
    }
}

/// Seeded split of `n` cases into `k` folds whose sizes differ by at most one.
/// Every index appears in exactly one fold; folds are sorted.
pub fn fold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(StudyError::invalid(format!("cannot split {n} cases into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, c) in order.into_iter().enumerate() {
        folds[i % k].push(c);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapClosure {
    pub d_r: Option<f64>,
    pub d: f64,
    pub d_b: f64,
    pub d_o: f64,
    pub defined: bool,
}

/// Share of the oracle-baseline gap closed by a score `d`:
/// `d_r = (d - d_b) / (d_o - d_b)`, undefined when `|d_o - d_b| <= eps`.
pub fn gap_closure(d: f64, d_b: f64, d_o: f64, eps: f64) -> GapClosure {
    let defined = (d_o - d_b).abs() > eps;
    GapClosure {
        d_r: defined.then(|| (d - d_b) / (d_o - d_b)),
        d,
        d_b,
        d_o,
        defined,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and standard deviation of surface dice per (target, source).
/// Diagonal cells come from oracle records, the rest from baseline records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub domains: Vec<String>,
    /// Keyed by `(target, source)`.
    pub cells: BTreeMap<(String, String), MatrixCell>,
}

impl TransferMatrix {
    pub fn get(&self, target: &str, source: &str) -> Option<&MatrixCell> {
        self.cells.get(&(target.to_string(), source.to_string()))
    }
}

pub fn build_transfer_matrix(records: &[ScoreRecord], domains: &[String]) -> Result<TransferMatrix> {
    let mut cells = BTreeMap::new();
    let mut missing = Vec::new();
    for t in domains {
        for s in domains {
            let want = if s == t { Method::Oracle } else { Method::Baseline };
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.method == want && &r.source_domain == s && &r.target_domain == t)
                .map(|r| r.surface_dice)
                .collect();
            if v.is_empty() {
                missing.push(format!("{want} {s}->{t}"));
                continue;
            }
            cells.insert(
                (t.clone(), s.clone()),
                MatrixCell {
                    mean: mean(&v),
                    std: std_dev(&v),
                    n: v.len(),
                },
            );
        }
    }
    if !missing.is_empty() {
        return Err(StudyError::MissingCells(missing));
    }
    Ok(TransferMatrix {
        domains: domains.to_vec(),
        cells,
    })
}

/// Directed (source, target) pair.
pub type Pair = (String, String);

/// Per-case reference scores for one directed pair.
struct PairRefs {
    baseline: BTreeMap<String, f64>,
    oracle: BTreeMap<String, f64>,
}

fn pair_refs(records: &[ScoreRecord], pair: &Pair) -> PairRefs {
    let baseline = records
        .iter()
        .filter(|r| r.method == Method::Baseline && r.source_domain == pair.0 && r.target_domain == pair.1)
        .map(|r| (r.case_id.clone(), r.surface_dice))
        .collect();
    let oracle = records
        .iter()
        .filter(|r| r.method == Method::Oracle && r.target_domain == pair.1)
        .map(|r| (r.case_id.clone(), r.surface_dice))
        .collect();
    PairRefs { baseline, oracle }
}

/// Directed pairs that carry fine-tuning records, in sorted order.
pub fn evaluated_pairs(records: &[ScoreRecord]) -> Vec<Pair> {
    records
        .iter()
        .filter(|r| r.method.strategy().is_some())
        .map(|r| (r.source_domain.clone(), r.target_domain.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Gap closure of one fine-tuning run, with the references averaged over
/// the same test cases that the run was scored on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub source_domain: String,
    pub target_domain: String,
    pub method: Method,
    pub availability: AvailabilityLevel,
    pub seed: u64,
    pub gap: GapClosure,
    /// Per-case surface dice keyed by case id.
    pub cases: BTreeMap<String, f64>,
}

/// Groups fine-tuning records into runs and scores each against its
/// baseline and oracle references.
pub fn run_scores(records: &[ScoreRecord], eps: f64) -> Result<Vec<RunScore>> {
    type Key = (String, String, Method, String, u64);
    let mut runs: BTreeMap<Key, (AvailabilityLevel, BTreeMap<String, f64>)> = BTreeMap::new();
    for r in records {
        let Some(level) = r.availability else { continue };
        if r.method.strategy().is_none() {
            continue;
        }
        let key = (r.source_domain.clone(), r.target_domain.clone(), r.method, level.to_string(), r.seed);
        runs.entry(key).or_insert((level, BTreeMap::new())).1.insert(r.case_id.clone(), r.surface_dice);
    }
    let mut refs: BTreeMap<Pair, PairRefs> = BTreeMap::new();
    let mut out = Vec::with_capacity(runs.len());
    let mut missing = BTreeSet::new();
    for ((s, t, method, _, seed), (level, cases)) in runs {
        let pair = (s.clone(), t.clone());
        let pr = refs.entry(pair.clone()).or_insert_with(|| pair_refs(records, &pair));
        let mut b = Vec::with_capacity(cases.len());
        let mut o = Vec::with_capacity(cases.len());
        for id in cases.keys() {
            match (pr.baseline.get(id), pr.oracle.get(id)) {
                (Some(&x), Some(&y)) => {
                    b.push(x);
                    o.push(y);
                }
                (None, _) => {
                    missing.insert(format!("baseline {s}->{t} case {id}"));
                }
                (_, None) => {
                    missing.insert(format!("oracle {t} case {id}"));
                }
            }
        }
        if b.len() != cases.len() {
            continue;
        }
        let d: Vec<f64> = cases.values().copied().collect();
        out.push(RunScore {
            source_domain: s,
            target_domain: t,
            method,
            availability: level,
            seed,
            gap: gap_closure(mean(&d), mean(&b), mean(&o), eps),
            cases,
        });
    }
    if !missing.is_empty() {
        return Err(StudyError::MissingCells(missing.into_iter().collect()));
    }
    Ok(out)
}

/// Seed-averaged score of one method on one pair at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub source_domain: String,
    pub target_domain: String,
    pub method: Method,
    pub availability: AvailabilityLevel,
    /// Mean gap closure over seeds; `None` when the pair's gap is degenerate.
    pub d_r: Option<f64>,
    /// Mean surface dice over seeds and cases.
    pub d: f64,
    pub seeds: Vec<u64>,
    /// Per-seed gap closure, in seed order.
    pub per_seed: Vec<Option<f64>>,
    /// Relative improvement keyed by `(case id, seed)`; raw surface dice when
    /// the gap is degenerate.
    pub instances: BTreeMap<(String, u64), f64>,
}

fn pair_scores(runs: &[RunScore]) -> BTreeMap<(String, Pair, Method), PairScore> {
    let mut out: BTreeMap<(String, Pair, Method), PairScore> = BTreeMap::new();
    for r in runs {
        let key = (
            r.availability.to_string(),
            (r.source_domain.clone(), r.target_domain.clone()),
            r.method,
        );
        let e = out.entry(key).or_insert_with(|| PairScore {
            source_domain: r.source_domain.clone(),
            target_domain: r.target_domain.clone(),
            method: r.method,
            availability: r.availability,
            d_r: None,
            d: 0.0,
            seeds: Vec::new(),
            per_seed: Vec::new(),
            instances: BTreeMap::new(),
        });
        e.seeds.push(r.seed);
        e.per_seed.push(r.gap.d_r);
        e.d += r.gap.d;
        let denom = r.gap.d_o - r.gap.d_b;
        for (case, &v) in &r.cases {
            // the pair-level baseline is shared by all methods, so only the
            // method's own score and the denominator's sign matter
            let x = if r.gap.defined { v / denom } else { v };
            e.instances.insert((case.clone(), r.seed), x);
        }
    }
    for e in out.values_mut() {
        let n = e.seeds.len() as f64;
        e.d /= n;
        let defined: Vec<f64> = e.per_seed.iter().flatten().copied().collect();
        e.d_r = (!defined.is_empty()).then(|| mean(&defined));
    }
    out
}

/// Aggregate of one (level, method) cell over pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCell {
    pub availability: AvailabilityLevel,
    pub method: Method,
    /// Mean over pairs of the per-pair mean gap closure; `None` when every
    /// pair is undefined.
    pub mean_d_r: Option<f64>,
    pub pairs: Vec<PairScore>,
    /// Pairs left out because their gap closure is undefined.
    pub excluded: Vec<Pair>,
}

fn require_cells(
    scores: &BTreeMap<(String, Pair, Method), PairScore>,
    pairs: &[Pair],
    levels: &[AvailabilityLevel],
    methods: &[Method],
) -> Result<()> {
    let mut missing = Vec::new();
    for l in levels {
        for p in pairs {
            for &m in methods {
                if !scores.contains_key(&(l.to_string(), p.clone(), m)) {
                    missing.push(format!("{m} {}->{} at {l}", p.0, p.1));
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(StudyError::MissingCells(missing))
    }
}

/// Mean gap closure per (level, method), weighting every pair equally.
/// Levels come back ordered from most to least data.
pub fn aggregate_trend(
    records: &[ScoreRecord],
    levels: &[AvailabilityLevel],
    methods: &[Method],
    eps: f64,
) -> Result<Vec<TrendCell>> {
    let runs = run_scores(records, eps)?;
    let scores = pair_scores(&runs);
    let pairs = evaluated_pairs(records);
    require_cells(&scores, &pairs, levels, methods)?;
    let mut levels = levels.to_vec();
    sort_levels(&mut levels);
    let mut out = Vec::new();
    for l in &levels {
        for &m in methods {
            let cell: Vec<PairScore> = pairs
                .iter()
                .map(|p| scores[&(l.to_string(), p.clone(), m)].clone())
                .collect();
            let defined: Vec<f64> = cell.iter().filter_map(|p| p.d_r).collect();
            let excluded = cell
                .iter()
                .filter(|p| p.d_r.is_none())
                .map(|p| (p.source_domain.clone(), p.target_domain.clone()))
                .collect();
            out.push(TrendCell {
                availability: *l,
                method: m,
                mean_d_r: (!defined.is_empty()).then(|| mean(&defined)),
                pairs: cell,
                excluded,
            });
        }
    }
    Ok(out)
}

/// Outcome of one pair at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairWinner {
    pub source_domain: String,
    pub target_domain: String,
    pub availability: AvailabilityLevel,
    pub winner: Method,
    pub significant: bool,
    /// Sign tests of the winner against every other method.
    pub tests: Vec<(Method, SignTest)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinnerRow {
    pub availability: AvailabilityLevel,
    pub method: Method,
    pub wins: usize,
    pub significant_wins: usize,
}

/// Ranks methods on one pair: higher mean gap closure first, falling back to
/// mean surface dice when the gap is degenerate; ties keep method order.
fn pick_winner(cands: &[&PairScore]) -> usize {
    let mut best = 0;
    for (i, c) in cands.iter().enumerate().skip(1) {
        let b = cands[best];
        let better = match (c.d_r, b.d_r) {
            (Some(x), Some(y)) => x > y,
            _ => c.d > b.d,
        };
        if better {
            best = i;
        }
    }
    best
}

/// Winner of every pair at every level. A win is significant when the
/// winner beats each other method in a paired sign test with p below the
/// significance level (vacuously so when it is the only method).
pub fn pair_winners(
    records: &[ScoreRecord],
    levels: &[AvailabilityLevel],
    methods: &[Method],
    eps: f64,
) -> Result<Vec<PairWinner>> {
    let runs = run_scores(records, eps)?;
    let scores = pair_scores(&runs);
    let pairs = evaluated_pairs(records);
    require_cells(&scores, &pairs, levels, methods)?;
    let mut levels = levels.to_vec();
    sort_levels(&mut levels);
    let mut out = Vec::new();
    for l in &levels {
        for p in &pairs {
            let cands: Vec<&PairScore> = methods.iter().map(|&m| &scores[&(l.to_string(), p.clone(), m)]).collect();
            let w = pick_winner(&cands);
            let mut tests = Vec::new();
            for (i, c) in cands.iter().enumerate() {
                if i == w {
                    continue;
                }
                let t = paired_sign_test_keyed(&cands[w].instances, &c.instances).map_err(|e| {
                    StudyError::invalid(format!("{}->{} at {l}: {} vs {}: {e}", p.0, p.1, methods[w], c.method))
                })?;
                tests.push((c.method, t));
            }
            let significant = tests
                .iter()
                .all(|(_, t)| t.winner == Some(Side::A) && t.significant());
            out.push(PairWinner {
                source_domain: p.0.clone(),
                target_domain: p.1.clone(),
                availability: *l,
                winner: methods[w],
                significant,
                tests,
            });
        }
    }
    Ok(out)
}

/// Per level, the number of pairs each method wins and how many of those
/// wins are significant. Counts sum to the number of pairs at every level.
pub fn winner_counts(
    records: &[ScoreRecord],
    levels: &[AvailabilityLevel],
    methods: &[Method],
    eps: f64,
) -> Result<Vec<WinnerRow>> {
    let winners = pair_winners(records, levels, methods, eps)?;
    let mut levels = levels.to_vec();
    sort_levels(&mut levels);
    let mut out = Vec::new();
    for l in &levels {
        for &m in methods {
            let mine = winners.iter().filter(|w| w.availability == *l && w.winner == m);
            let (wins, sig) = mine.fold((0, 0), |(a, b), w| (a + 1, b + w.significant as usize));
            out.push(WinnerRow {
                availability: *l,
                method: m,
                wins,
                significant_wins: sig,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_cases() {
        let f = fold_split(9, 3, 4).unwrap();
        assert!(f.iter().all(|x| x.len() == 3));
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_eq!(f, fold_split(9, 3, 4).unwrap());
        let g = fold_split(8, 3, 1).unwrap();
        assert_eq!(g.iter().map(Vec::len).sum::<usize>(), 8);
        assert!(g.iter().all(|x| (2..=3).contains(&x.len())));
        assert!(fold_split(2, 3, 0).is_err());
    }

    #[test]
    fn gap_closure_values() {
        assert_eq!(gap_closure(0.87, 0.09, 0.87, GAP_EPSILON).d_r, Some(1.0));
        assert_eq!(gap_closure(0.09, 0.09, 0.87, GAP_EPSILON).d_r, Some(0.0));
        let g = gap_closure(0.48, 0.09, 0.87, GAP_EPSILON);
        assert!((g.d_r.unwrap() - 0.5).abs() < 1e-12);
        let u = gap_closure(0.5, 0.4, 0.4 + 1e-7, GAP_EPSILON);
        assert!(!u.defined && u.d_r.is_none());
    }

    #[test]
    fn record_validation() {
        let mut r = ScoreRecord {
            source_domain: "A".into(),
            target_domain: "B".into(),
            method: Method::Oracle,
            availability: None,
            case_id: "c".into(),
            surface_dice: 0.5,
            dice: 0.5,
            seed: 0,
        };
        assert!(r.validate().is_err());
        r.method = Method::Baseline;
        assert!(r.validate().is_ok());
        r.surface_dice = 1.5;
        assert!(r.validate().is_err());
        r.surface_dice = 0.5;
        r.method = Method::FirstLayers;
        assert!(r.validate().is_err());
    }
}
