//! End-to-end driver: source training, oracle cross-validation, transfer,
//! fine-tuning, record collection and reporting.
//!
//! Output tree, relative to the manifest's `out`:
//!
//! ```text
//! manifest.resolved.json
//! ledger.json
//! source/<D>/{model.ckpt, history.csv}
//! oracle/<D>/fold<k>/{model.ckpt, history.csv, scores.jsonl}
//! transfer/<S>_to_<T>/scores.jsonl
//! finetune/<S>_to_<T>/<strategy>/<level>/seed<n>/{model.ckpt, history.csv, provenance.json, scores.jsonl}
//! records.jsonl
//! report/{transfer_matrix.csv, ..., winners.svg}
//! ```
//!
//! Every file except `ledger.json` is listed by exactly one ledger entry.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use layershift_core::io::LoadedCase;
use layershift_core::rng::derive_str;
use layershift_core::{dice, surface_dice};
use layershift_nn::checkpoint;
use layershift_nn::SegmentationModel;

use crate::adaptation::{finetune, training_slices, AvailabilityLevel, Provenance, Strategy};
use crate::data::DomainData;
use crate::error::{Result, StudyError};
use crate::evaluation::{fold_split, Method, ScoreRecord};
use crate::ledger::{artifacts, hash_file, hash_json, LedgerEntry, RunLedger, StepStatus};
use crate::manifest::{ExperimentManifest, Profile};
use crate::records::{read_records, RecordStore};
use crate::report::{Report, REPORT_FILES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Source,
    Oracle,
    Transfer,
    Finetune,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Source, Stage::Oracle, Stage::Transfer, Stage::Finetune, Stage::Report];
}

/// Restricts fine-tuning to matching runs; `None` fields match everything.
#[derive(Debug, Clone, Default)]
pub struct RunFilter {
    pub source: Option<String>,
    pub target: Option<String>,
    pub strategy: Option<Strategy>,
    pub level: Option<AvailabilityLevel>,
    pub seed: Option<u64>,
}

impl RunFilter {
    fn domain(&self, d: &str) -> bool {
        self.source.as_deref().is_none_or(|s| s == d)
    }

    fn pair(&self, s: &str, t: &str) -> bool {
        self.domain(s) && self.target.as_deref().is_none_or(|x| x == t)
    }

    fn run(&self, st: Strategy, l: AvailabilityLevel, seed: u64) -> bool {
        self.strategy.is_none_or(|x| x == st) && self.level.is_none_or(|x| x == l) && self.seed.is_none_or(|x| x == seed)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StudySummary {
    pub out: PathBuf,
    pub executed: usize,
    pub reused: usize,
    pub finetune_runs: usize,
    /// `(step, error)` for every failed step.
    pub failed: Vec<(String, String)>,
}

impl StudySummary {
    pub fn ok(&self) -> bool {
        self.failed.is_empty()
    }
}

struct Driver<'a> {
    manifest: &'a ExperimentManifest,
    profile: Profile,
    out: PathBuf,
    ledger: RunLedger,
    data: BTreeMap<String, DomainData>,
    summary: StudySummary,
}

fn slash(parts: &[&str]) -> String {
    parts.join("/")
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| StudyError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| StudyError::io(path, e))
}

fn save_model(model: &SegmentationModel<f32>, path: &Path) -> Result<()> {
    write(path, checkpoint::to_bytes(model))
}

/// Writes `records` as a fresh JSON-lines file.
fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    if path.exists() {
        fs::remove_file(path).map_err(|e| StudyError::io(path, e))?;
    }
    RecordStore::new(path).append_all(records)
}

/// Seed handed to [`finetune`] for fine-tuning seed `seed` on a pair.
pub fn run_seed(seed: u64, source: &str, target: &str) -> u64 {
    derive_str(seed, &format!("{source}->{target}"))
}

/// Scores `model` on every case.
#[allow(clippy::too_many_arguments)]
pub fn score_cases(
    model: &SegmentationModel<f32>,
    cases: &[LoadedCase],
    source: &str,
    target: &str,
    method: Method,
    availability: Option<AvailabilityLevel>,
    seed: u64,
    tolerance_mm: f64,
    batch: usize,
) -> Result<Vec<ScoreRecord>> {
    cases
        .iter()
        .map(|c| {
            let pred = model.predict_volume(&c.volume, batch)?;
            Ok(ScoreRecord {
                source_domain: source.to_string(),
                target_domain: target.to_string(),
                method,
                availability,
                case_id: c.id.clone(),
                surface_dice: surface_dice(&pred, &c.mask, tolerance_mm)?.value,
                dice: dice(&pred, &c.mask)?.value,
                seed,
            })
        })
        .collect()
}

/// Trains a fresh model on every axial slice of `cases`.
pub fn train_on_cases(
    profile: &Profile,
    cases: &[&LoadedCase],
    seed: u64,
) -> Result<(SegmentationModel<f32>, layershift_nn::TrainHistory)> {
    let mut data = Vec::new();
    for c in cases {
        data.extend(training_slices(c, 0..c.volume.shape()[2])?);
    }
    let mut model = SegmentationModel::<f32>::new(profile.model.clone(), derive_str(seed, "init"))?;
    let config = layershift_nn::TrainConfig {
        seed: derive_str(seed, "train"),
        ..profile.source.clone()
    };
    let history = layershift_nn::train(&mut model, &data, &config)?;
    Ok((model, history))
}

impl<'a> Driver<'a> {
    /// Runs or reuses one step. Returns the outputs hash on success.
    fn step(
        &mut self,
        key: &str,
        kind: &str,
        seed: u64,
        inputs: serde_json::Value,
        run: impl FnOnce(&Self) -> Result<Vec<String>>,
    ) -> Option<String> {
        let inputs_hash = hash_json(&json!({"step": key, "kind": kind, "seed": seed, "inputs": inputs}));
        if let Some(e) = self.ledger.reusable(key, &inputs_hash, &self.out) {
            self.summary.reused += 1;
            return Some(e.outputs_hash.clone());
        }
        let start = Instant::now();
        let result = run(self).and_then(|rel| artifacts(&self.out, &rel));
        let seconds = start.elapsed().as_secs_f64();
        let (entry, hash) = match result {
            Ok((outputs, outputs_hash)) => (
                LedgerEntry {
                    step: key.into(),
                    kind: kind.into(),
                    inputs_hash,
                    outputs,
                    outputs_hash: outputs_hash.clone(),
                    seconds,
                    seed,
                    status: StepStatus::Ok,
                    error: None,
                },
                Some(outputs_hash),
            ),
            Err(e) => {
                self.summary.failed.push((key.to_string(), e.to_string()));
                (
                    LedgerEntry {
                        step: key.into(),
                        kind: kind.into(),
                        inputs_hash,
                        outputs: Vec::new(),
                        outputs_hash: String::new(),
                        seconds,
                        seed,
                        status: StepStatus::Failed,
                        error: Some(e.to_string()),
                    },
                    None,
                )
            }
        };
        self.summary.executed += 1;
        if let Err(e) = self.ledger.append(entry) {
            self.summary.failed.push((key.to_string(), format!("ledger: {e}")));
            return None;
        }
        hash
    }

    fn domain(&self, d: &str) -> &DomainData {
        &self.data[d]
    }

    fn manifest_step(&mut self) -> Option<String> {
        let text = self.manifest.resolved_json();
        let rel = "manifest.resolved.json".to_string();
        self.step("manifest", "manifest", self.manifest.seed, json!(text), move |d| {
            write(&d.out.join(&rel), &text)?;
            Ok(vec![rel])
        })
    }

    fn source_step(&mut self, d: &str) -> Option<String> {
        let seed = derive_str(self.manifest.seed, &format!("source/{d}"));
        let inputs = json!({
            "model": self.profile.model,
            "config": self.profile.source,
            "data": self.domain(d).content_hash,
        });
        let name = d.to_string();
        self.step(&format!("source/{d}"), "source", seed, inputs, move |dr| {
            let cases: Vec<&LoadedCase> = dr.domain(&name).cases.iter().collect();
            let (model, history) = train_on_cases(&dr.profile, &cases, seed)?;
            let ckpt = slash(&["source", &name, "model.ckpt"]);
            let hist = slash(&["source", &name, "history.csv"]);
            save_model(&model, &dr.out.join(&ckpt))?;
            write(&dr.out.join(&hist), history.to_csv())?;
            Ok(vec![ckpt, hist])
        })
    }

    fn oracle_steps(&mut self, d: &str) -> Vec<Option<String>> {
        let n = self.domain(d).cases.len();
        let folds = match fold_split(n, self.manifest.folds, derive_str(self.manifest.seed, &format!("folds/{d}"))) {
            Ok(f) => f,
            Err(e) => {
                self.summary.failed.push((format!("oracle/{d}"), e.to_string()));
                return vec![None];
            }
        };
        let mut out = Vec::new();
        for (k, test) in folds.iter().enumerate() {
            let seed = derive_str(self.manifest.seed, &format!("oracle/{d}/{k}"));
            let inputs = json!({
                "model": self.profile.model,
                "config": self.profile.source,
                "data": self.domain(d).content_hash,
                "test": test,
                "tolerance_mm": self.manifest.tolerance_mm,
            });
            let name = d.to_string();
            let test = test.clone();
            let study_seed = self.manifest.seed;
            out.push(self.step(&format!("oracle/{d}/fold{k}"), "oracle", seed, inputs, move |dr| {
                let all = &dr.domain(&name).cases;
                let train: Vec<&LoadedCase> = (0..all.len()).filter(|i| !test.contains(i)).map(|i| &all[i]).collect();
                let held: Vec<LoadedCase> = test.iter().map(|&i| all[i].clone()).collect();
                let (model, history) = train_on_cases(&dr.profile, &train, seed)?;
                let recs = score_cases(
                    &model,
                    &held,
                    &name,
                    &name,
                    Method::Oracle,
                    None,
                    study_seed,
                    dr.manifest.tolerance_mm,
                    dr.profile.inference_batch,
                )?;
                let dir = format!("oracle/{name}/fold{k}");
                let files = [format!("{dir}/model.ckpt"), format!("{dir}/history.csv"), format!("{dir}/scores.jsonl")];
                save_model(&model, &dr.out.join(&files[0]))?;
                write(&dr.out.join(&files[1]), history.to_csv())?;
                write_scores(&dr.out.join(&files[2]), &recs)?;
                Ok(files.to_vec())
            }));
        }
        out
    }

    fn load_source(&self, s: &str) -> Result<(SegmentationModel<f32>, String)> {
        let path = self.out.join(slash(&["source", s, "model.ckpt"]));
        Ok((checkpoint::load(&path)?, hash_file(&path)?))
    }

    fn transfer_step(&mut self, s: &str, t: &str, source_hash: &str) -> Option<String> {
        let pool = self.manifest.pool_size();
        let inputs = json!({
            "source": source_hash,
            "target": self.domain(t).content_hash,
            "pool": pool,
            "tolerance_mm": self.manifest.tolerance_mm,
            "batch": self.profile.inference_batch,
        });
        let (s, t) = (s.to_string(), t.to_string());
        self.step(&format!("transfer/{s}_to_{t}"), "transfer", self.manifest.seed, inputs, move |dr| {
            let (model, _) = dr.load_source(&s)?;
            let (_, test) = dr.domain(&t).split(pool);
            let recs = score_cases(
                &model,
                test,
                &s,
                &t,
                Method::Baseline,
                None,
                dr.manifest.seed,
                dr.manifest.tolerance_mm,
                dr.profile.inference_batch,
            )?;
            let rel = format!("transfer/{s}_to_{t}/scores.jsonl");
            write_scores(&dr.out.join(&rel), &recs)?;
            Ok(vec![rel])
        })
    }

    fn finetune_step(
        &mut self,
        s: &str,
        t: &str,
        source_hash: &str,
        strategy: Strategy,
        level: AvailabilityLevel,
        seed: u64,
    ) -> Option<String> {
        let pool = self.manifest.pool_size();
        let dir = format!("finetune/{s}_to_{t}/{strategy}/{}/seed{seed}", level.slug());
        let inputs = json!({
            "source": source_hash,
            "target": self.domain(t).content_hash,
            "config": self.profile.finetune,
            "strategy": strategy,
            "level": level,
            "pool": pool,
            "tolerance_mm": self.manifest.tolerance_mm,
            "batch": self.profile.inference_batch,
        });
        let (s, t) = (s.to_string(), t.to_string());
        self.summary.finetune_runs += 1;
        self.step(&dir.clone(), "finetune", seed, inputs, move |dr| {
            let (base, base_hash) = dr.load_source(&s)?;
            let (adapt_pool, test) = dr.domain(&t).split(pool);
            let tuned = finetune(&base, adapt_pool, strategy, level, &dr.profile.finetune, run_seed(seed, &s, &t))?;
            let recs = score_cases(
                &tuned.model,
                test,
                &s,
                &t,
                strategy.into(),
                Some(level),
                seed,
                dr.manifest.tolerance_mm,
                dr.profile.inference_batch,
            )?;
            let provenance = Provenance {
                source_domain: s.clone(),
                target_domain: t.clone(),
                strategy,
                availability: level,
                seed,
                base_checkpoint_hash: base_hash,
                scans: tuned.selection.scans.clone(),
                slices: tuned.selection.slices.len(),
            };
            let files = [
                format!("{dir}/model.ckpt"),
                format!("{dir}/history.csv"),
                format!("{dir}/provenance.json"),
                format!("{dir}/scores.jsonl"),
            ];
            save_model(&tuned.model, &dr.out.join(&files[0]))?;
            write(&dr.out.join(&files[1]), tuned.history.to_csv())?;
            let mut pj = serde_json::to_string_pretty(&provenance).expect("provenance serializes");
            pj.push('\n');
            write(&dr.out.join(&files[2]), pj)?;
            write_scores(&dr.out.join(&files[3]), &recs)?;
            Ok(files.to_vec())
        })
    }

    fn records_step(&mut self, score_files: Vec<(String, String)>) -> Option<String> {
        let inputs = json!(score_files);
        self.step("records", "records", self.manifest.seed, inputs, move |dr| {
            let rel = "records.jsonl".to_string();
            let path = dr.out.join(&rel);
            if path.exists() {
                fs::remove_file(&path).map_err(|e| StudyError::io(&path, e))?;
            }
            let store = RecordStore::new(&path);
            for (f, _) in &score_files {
                store.append_all(&read_records(&dr.out.join(f))?)?;
            }
            Ok(vec![rel])
        })
    }

    fn report_step(&mut self, records_hash: &str) -> Option<String> {
        let methods: Vec<Method> = self.manifest.strategies.iter().map(|&s| s.into()).collect();
        let inputs = json!({
            "records": records_hash,
            "domains": self.manifest.domains,
            "levels": self.manifest.levels,
            "methods": methods,
        });
        self.step("report", "report", self.manifest.seed, inputs, move |dr| {
            let records = read_records(&dr.out.join("records.jsonl"))?;
            let report = Report::build(&records, &dr.manifest.domains, &dr.manifest.levels, &methods)?;
            report.write(&dr.out.join("report"))?;
            Ok(REPORT_FILES.iter().map(|f| format!("report/{f}")).collect())
        })
    }
}

/// Runs the requested stages of a study, reusing completed steps recorded in
/// the ledger. Stages pull in what they depend on: transfer and fine-tuning
/// need source models, the report needs everything.
pub fn run_study(manifest: &ExperimentManifest, stages: &[Stage], filter: &RunFilter) -> Result<StudySummary> {
    let want = |s: Stage| stages.contains(&s) || stages.contains(&Stage::Report);
    let out = manifest.out.clone();
    fs::create_dir_all(&out).map_err(|e| StudyError::io(&out, e))?;
    let mut data = BTreeMap::new();
    for d in &manifest.domains {
        data.insert(d.clone(), DomainData::load(&manifest.dataset, d)?);
    }
    let mut dr = Driver {
        manifest,
        profile: manifest.profile(),
        ledger: RunLedger::open(&out)?,
        out: out.clone(),
        data,
        summary: StudySummary {
            out,
            ..Default::default()
        },
    };
    dr.manifest_step();

    let domains = manifest.domains.clone();
    let mut source_hash: BTreeMap<String, Option<String>> = BTreeMap::new();
    if want(Stage::Source) || want(Stage::Transfer) || want(Stage::Finetune) {
        for d in &domains {
            if filter.domain(d) || want(Stage::Report) {
                let h = dr.source_step(d).and_then(|_| dr.load_source(d).ok().map(|(_, h)| h));
                source_hash.insert(d.clone(), h);
            }
        }
    }

    let mut score_files: Vec<(String, String)> = Vec::new();
    let mut branch_ok = true;
    if want(Stage::Oracle) {
        for d in &domains {
            let n = dr.oracle_steps(d);
            for (k, h) in n.into_iter().enumerate() {
                match h {
                    Some(h) => score_files.push((format!("oracle/{d}/fold{k}/scores.jsonl"), h)),
                    None => branch_ok = false,
                }
            }
        }
    }

    let pairs: Vec<(String, String)> = domains
        .iter()
        .flat_map(|s| domains.iter().filter(move |t| *t != s).map(move |t| (s.clone(), t.clone())))
        .collect();
    if want(Stage::Transfer) {
        for (s, t) in &pairs {
            if !(filter.pair(s, t) || want(Stage::Report)) {
                continue;
            }
            let Some(Some(sh)) = source_hash.get(s).cloned() else {
                branch_ok = false;
                continue;
            };
            match dr.transfer_step(s, t, &sh) {
                Some(h) => score_files.push((format!("transfer/{s}_to_{t}/scores.jsonl"), h)),
                None => branch_ok = false,
            }
        }
    }

    if want(Stage::Finetune) {
        for (s, t) in &pairs {
            if !filter.pair(s, t) {
                continue;
            }
            let Some(Some(sh)) = source_hash.get(s).cloned() else {
                branch_ok = false;
                continue;
            };
            for &st in &manifest.strategies {
                for &l in &manifest.levels {
                    for &seed in &manifest.seeds {
                        if !filter.run(st, l, seed) {
                            continue;
                        }
                        let dir = format!("finetune/{s}_to_{t}/{st}/{}/seed{seed}", l.slug());
                        match dr.finetune_step(s, t, &sh, st, l, seed) {
                            Some(h) => score_files.push((format!("{dir}/scores.jsonl"), h)),
                            None => branch_ok = false,
                        }
                    }
                }
            }
        }
    }

    if stages.contains(&Stage::Report) {
        if branch_ok {
            if let Some(h) = dr.records_step(score_files) {
                dr.report_step(&h);
            }
        } else {
            dr.summary
                .failed
                .push(("report".into(), "skipped because an upstream step failed".into()));
        }
    }
    Ok(dr.summary)
}
