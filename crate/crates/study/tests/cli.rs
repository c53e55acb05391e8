//! End-to-end checks of the `layershift` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use layershift::ingest::encode_nifti;
use layershift::ledger::{RunLedger, LEDGER_FILE};
use layershift::records::read_records;
use layershift_core::io::{write_mask, DatasetManifest};
use layershift_core::{Geometry, Mask};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_layershift"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let o = run(args, cwd);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// The single JSON error line a failing command prints.
fn error_line(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

/// Every file under `dir` by relative path.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

const TINY: &str = r#"{
  "dataset": "data/dataset.json",
  "domains": ["A", "B", "C"],
  "strategies": ["first_layers", "last_layers"],
  "levels": ["1 scan", "1/4"],
  "seeds": [0, 1],
  "overrides": {
    "model": {"variant": "residual_unet", "depth": 2, "base_filters": 2},
    "source": {"epochs": 1, "iterations_per_epoch": 1, "lr_drop_epoch": 1, "batch_size": 2, "crop_size": [16, 16]},
    "finetune": {"epochs": 1, "iterations_per_epoch": 1, "lr_drop_epoch": 1, "batch_size": 2, "crop_size": [16, 16]}
  },
  "out": "run"
}"#;

/// A 3-domain, 4-case benchmark at 16^3 and the tiny manifest.
fn tiny_setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", "data", "--cases", "4", "--shape", "16,16,16"], dir.path());
    fs::write(dir.path().join("m.json"), TINY).unwrap();
    dir
}

fn summary(stdout: &str) -> (usize, usize, usize) {
    let row: Vec<usize> = stdout.lines().nth(1).unwrap().split(',').skip(1).take(3).map(|s| s.parse().unwrap()).collect();
    (row[0], row[1], row[2])
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = |o: &'static str| vec!["synth", "--seed", "7", "--cases", "3", "--shape", "16,16,16", "--out", o];
    ok(&args("a"), dir.path());
    ok(&args("b"), dir.path());
    let a = tree(&dir.path().join("a"));
    assert!(a.contains_key("dataset.json"));
    assert_eq!(a.len(), 1 + 3 * 3 * 4);
    assert_eq!(a, tree(&dir.path().join("b")));
    ok(&["synth", "--seed", "8", "--cases", "3", "--shape", "16,16,16", "--out", "c"], dir.path());
    assert_ne!(a, tree(&dir.path().join("c")));
}

#[test]
fn report_without_store_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let e = error_line(&run(&["report", "--records", "nowhere/records.jsonl"], dir.path()));
    assert_eq!(e["error"], "missing_file");
    assert!(e["path"].as_str().unwrap().ends_with("nowhere/records.jsonl"));
}

#[test]
fn manifest_schema_errors() {
    let dir = tiny_setup();
    let p = dir.path();
    let bad = TINY.replace("\"first_layers\", \"last_layers\"", "\"middle_layers\"");
    fs::write(p.join("bad.json"), bad).unwrap();
    let e = error_line(&run(&["study", "--manifest", "bad.json"], p));
    assert_eq!(e["error"], "schema");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("strategies") && msg.contains("middle_layers"), "{msg}");

    let v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    let mut no_seeds = v.clone();
    no_seeds.as_object_mut().unwrap().remove("seeds");
    fs::write(p.join("noseeds.json"), no_seeds.to_string()).unwrap();
    let e = error_line(&run(&["study", "--manifest", "noseeds.json"], p));
    assert!(e["message"].as_str().unwrap().contains("seeds nonempty"), "{e}");

    let mut one_domain = v.clone();
    one_domain["domains"] = serde_json::json!(["A"]);
    fs::write(p.join("one.json"), one_domain.to_string()).unwrap();
    assert_eq!(error_line(&run(&["study", "--manifest", "one.json"], p))["error"], "schema");

    let e = error_line(&run(&["study", "--manifest", "absent.json"], p));
    assert_eq!(e["error"], "missing_file");
    assert!(e["path"].as_str().unwrap().ends_with("absent.json"));
}

#[test]
fn usage_errors_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let e = error_line(&run(&["finetune", "--strategy", "middle_layers"], dir.path()));
    assert_eq!(e["error"], "usage");
    let e = error_line(&run(&["synth", "--out", "x", "--domains", "A,Q"], dir.path()));
    assert_eq!(e["error"], "invalid_argument");
}

#[test]
fn study_counts_resumes_and_is_deterministic() {
    let dir = tiny_setup();
    let p = dir.path();
    let out = ok(&["study", "--manifest", "m.json", "--threads", "1"], p);
    let (executed, reused, runs) = summary(&out);
    // 6 pairs x 2 strategies x 2 levels x 2 seeds
    assert_eq!(runs, 48);
    assert_eq!(reused, 0);
    // manifest, 3 sources, 9 folds, 6 transfers, 48 fine-tunes, records, report
    assert_eq!(executed, 1 + 3 + 9 + 6 + 48 + 1 + 1);

    let run_dir = p.join("run");
    let recs = read_records(&run_dir.join("records.jsonl")).unwrap();
    let ft = recs.iter().filter(|r| r.availability.is_some()).count();
    // 48 runs x 3 test cases of the target domain
    assert_eq!(ft, 48 * 3);
    let csv = fs::read_to_string(run_dir.join("report/transfer_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().all(|l| l.split(',').count() == 4));
    let winners = fs::read_to_string(run_dir.join("report/winners.csv")).unwrap();
    for level in ["1 scan", "1/4"] {
        let wins: usize = winners
            .lines()
            .filter(|l| l.starts_with(&format!("{level},")))
            .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(wins, 6, "{level}");
    }

    // every file but the ledger is listed by exactly one entry
    let ledger = RunLedger::open(&run_dir).unwrap();
    let mut listed: BTreeMap<String, usize> = BTreeMap::new();
    for e in &ledger.entries {
        for a in &e.outputs {
            *listed.entry(a.path.clone()).or_default() += 1;
        }
    }
    let files: Vec<String> = tree(&run_dir).into_keys().filter(|f| f != LEDGER_FILE).collect();
    assert_eq!(files, listed.keys().cloned().collect::<Vec<_>>());
    assert!(listed.values().all(|&n| n == 1));

    let first = tree(&run_dir);
    let again = ok(&["study", "--manifest", "m.json", "--threads", "1"], p);
    assert_eq!(summary(&again), (0, executed, 48));

    // a damaged artifact is recomputed, and only its step reruns
    let victim = run_dir.join("finetune/A_to_B/first_layers/scans_1/seed0/scores.jsonl");
    fs::write(&victim, b"").unwrap();
    let (re, _, _) = summary(&ok(&["study", "--manifest", "m.json", "--threads", "1"], p));
    assert_eq!(re, 1);
    let mut rebuilt = tree(&run_dir);
    let mut before = first.clone();
    rebuilt.remove(LEDGER_FILE);
    before.remove(LEDGER_FILE);
    assert_eq!(before, rebuilt);

    ok(&["study", "--manifest", "m.json", "--threads", "1", "--out", "run2"], p);
    let mut second = tree(&p.join("run2"));
    let mut first = first;
    second.remove(LEDGER_FILE);
    first.remove(LEDGER_FILE);
    // the resolved manifest echoes the output directory
    second.remove("manifest.resolved.json");
    first.remove("manifest.resolved.json");
    assert_eq!(first, second);
}

#[test]
fn direct_finetune_from_checkpoint() {
    let dir = tiny_setup();
    let p = dir.path();
    ok(&["train-source", "--manifest", "m.json", "--domain", "A"], p);
    let ckpt = p.join("run/source/A/model.ckpt");
    assert!(ckpt.exists());
    assert!(!p.join("run/source/B").exists());
    let args = [
        "finetune", "--manifest", "m.json", "--checkpoint", "run/source/A/model.ckpt", "--source", "A", "--target",
        "C", "--strategy", "first_layers", "--level", "1/4", "--out", "direct",
    ];
    let out = ok(&args, p);
    assert_eq!(out.lines().count(), 1 + 3);
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("direct/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["strategy"], "first_layers");
    assert_eq!(prov["availability"], "1/4");
    assert_eq!(read_records(&p.join("direct/scores.jsonl")).unwrap().len(), 3);
}

fn cube_mask(n: usize, lo: usize, hi: usize) -> Mask {
    let mut data = vec![0u8; n * n * n];
    for x in lo..hi {
        for y in lo..hi {
            for z in lo..hi {
                data[(x * n + y) * n + z] = 1;
            }
        }
    }
    Mask::new(Geometry::new([n; 3], [1.0; 3]).unwrap(), data).unwrap()
}

#[test]
fn evaluate_pairs_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_mask(&p.join("a.json"), &cube_mask(6, 1, 5)).unwrap();
    write_mask(&p.join("b.json"), &cube_mask(6, 1, 5)).unwrap();
    write_mask(&p.join("e.json"), &cube_mask(6, 0, 0)).unwrap();
    fs::write(p.join("pairs.csv"), "case_id,prediction,reference\nsame,a.json,b.json\nempty,e.json,a.json\n").unwrap();
    let out = ok(&["evaluate", "--pairs", "pairs.csv", "--out", "m"], p);
    let want = "case_id,dice,surface_dice,tolerance_mm\nsame,1.000000,1.000000,1\nempty,0.000000,0.000000,1\n";
    assert_eq!(out, want);
    assert_eq!(fs::read_to_string(p.join("m/metrics.csv")).unwrap(), want);
    let json = ok(&["evaluate", "--pairs", "pairs.csv", "--format", "json"], p);
    let first: serde_json::Value = serde_json::from_str(json.lines().next().unwrap()).unwrap();
    assert_eq!(first["case_id"], "same");
    assert_eq!(first["dice"], 1.0);
}

#[test]
fn ingest_nifti_directory() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::create_dir_all(p.join("img")).unwrap();
    fs::create_dir_all(p.join("msk")).unwrap();
    let shape = [4, 3, 2];
    let img: Vec<f32> = (0..24).map(|i| i as f32).collect();
    let msk: Vec<f32> = (0..24).map(|i| (i % 2) as f32).collect();
    for id in ["CC0001_philips_15_55_M", "CC0002_siemens_3_40_F"] {
        fs::write(p.join(format!("img/{id}.nii")), encode_nifti(shape, [1.0, 1.0, 2.0], &img)).unwrap();
        fs::write(p.join(format!("msk/{id}_ss.nii")), encode_nifti(shape, [1.0, 1.0, 2.0], &msk)).unwrap();
    }
    let out = ok(&["ingest", "--images", "img", "--masks", "msk", "--out", "native"], p);
    assert_eq!(out.lines().count(), 3);
    let m = DatasetManifest::load(&p.join("native/dataset.json")).unwrap();
    assert_eq!(m.domains, vec!["philips_15".to_string(), "siemens_3".to_string()]);
    let case = layershift_core::io::load_case(&p.join("native"), &m.cases[0]).unwrap();
    assert_eq!(case.volume.shape(), shape);
    assert_eq!(case.volume.geometry().spacing, [1.0, 1.0, 2.0]);
    // first NIfTI axis varies fastest
    assert_eq!(case.volume.get(1, 0, 0), 1.0);
    assert_eq!(case.volume.get(0, 1, 0), 4.0);
    assert_eq!(case.mask.count(), 12);

    let e = error_line(&run(&["ingest", "--images", "img", "--masks", "nope", "--out", "x"], p));
    assert_eq!(e["error"], "missing_file");
}
