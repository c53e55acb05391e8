use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use layershift::adaptation::{finetune, AvailabilityLevel, Provenance, Strategy};
use layershift::data::DomainData;
use layershift::error::{Result, StudyError};
use layershift::ingest::ingest_dir;
use layershift::ledger::hash_file;
use layershift::manifest::{ExperimentManifest, Profile, ProfileName};
use layershift::records::read_records;
use layershift::report::Report;
use layershift::study::{run_seed, run_study, score_cases, RunFilter, Stage, StudySummary};
use layershift_core::io::read_mask;
use layershift_core::metrics::DEFAULT_TOLERANCE_MM;
use layershift_core::synth::{build_benchmark, default_domains, DEFAULT_CASES_PER_DOMAIN, DEFAULT_SHAPE};
use layershift_core::{dice, surface_dice, Geometry};
use layershift_nn::checkpoint;

#[derive(Parser)]
#[command(name = "layershift", version, about = "Layer-selective domain adaptation study for 2D U-Nets")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Experiment manifest (JSON).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Overrides the manifest's study seed, or seeds `synth`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    /// Output directory; overrides the manifest's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 is the deterministic reference mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic three-domain benchmark.
    Synth {
        #[arg(long, default_value_t = DEFAULT_CASES_PER_DOMAIN)]
        cases: usize,
        /// Grid size as nx,ny,nz.
        #[arg(long, value_delimiter = ',')]
        shape: Option<Vec<usize>>,
        /// Subset of the default domains, e.g. A,C.
        #[arg(long, value_delimiter = ',')]
        domains: Option<Vec<String>>,
    },
    /// Convert NIfTI images and masks into the native format.
    Ingest {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Domain for every case instead of deriving it from file names.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Train one model per source domain.
    TrainSource {
        /// Only this domain.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Cross-validated same-domain scores.
    Oracle,
    /// Score every source model on every other domain.
    Transfer,
    /// Fine-tune source models on target data.
    Finetune {
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// e.g. "1 scan" or "1/12".
        #[arg(long)]
        level: Option<AvailabilityLevel>,
        /// Fine-tune this checkpoint directly instead of running the manifest.
        #[arg(long, requires_all = ["source", "target", "strategy", "level"])]
        checkpoint: Option<PathBuf>,
    },
    /// Dice and surface dice for pairs of mask files listed in a CSV with
    /// columns case_id,prediction,reference.
    Evaluate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE_MM)]
        tolerance: f64,
    },
    /// Tables and figures from a record store.
    Report {
        #[arg(long)]
        records: PathBuf,
    },
    /// The full study: source, oracle, transfer, fine-tuning and report.
    Study,
}

fn fail(e: &StudyError) -> ExitCode {
    let mut line = json!({"error": e.kind(), "message": e.to_string()});
    if let Some(p) = e.path() {
        line["path"] = json!(p.display().to_string());
    }
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn print_rows<T: Serialize>(format: Format, header: &[&str], rows: &[T], cells: impl Fn(&T) -> Vec<String>) {
    match format {
        Format::Json => {
            for r in rows {
                println!("{}", serde_json::to_string(r).expect("row serializes"));
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            let _ = w.write_record(header);
            for r in rows {
                let _ = w.write_record(cells(r));
            }
            let _ = w.flush();
        }
    }
}

fn load_manifest(g: &Global) -> Result<ExperimentManifest> {
    let path = g
        .manifest
        .as_ref()
        .ok_or_else(|| StudyError::invalid("--manifest is required for this command"))?;
    let mut m = ExperimentManifest::load(path)?;
    if let Some(s) = g.seed {
        m.seed = s;
    }
    if let Some(p) = g.profile {
        m.profile = match p {
            ProfileArg::Paper => ProfileName::Paper,
            ProfileArg::Desk => ProfileName::Desk,
        };
        m.validate()?;
    }
    if let Some(o) = &g.out {
        m.out = o.clone();
    }
    Ok(m)
}

fn require_out(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| StudyError::invalid("--out is required for this command"))
}

fn print_summary(format: Format, s: &StudySummary) {
    #[derive(Serialize)]
    struct Row<'a> {
        out: String,
        executed: usize,
        reused: usize,
        finetune_runs: usize,
        failed: &'a [(String, String)],
    }
    let row = Row {
        out: s.out.display().to_string(),
        executed: s.executed,
        reused: s.reused,
        finetune_runs: s.finetune_runs,
        failed: &s.failed,
    };
    print_rows(format, &["out", "executed", "reused", "finetune_runs", "failed"], &[row], |r| {
        vec![
            r.out.clone(),
            r.executed.to_string(),
            r.reused.to_string(),
            r.finetune_runs.to_string(),
            r.failed.len().to_string(),
        ]
    });
}

fn stages(g: &Global, stages: &[Stage], filter: RunFilter) -> Result<()> {
    let m = load_manifest(g)?;
    let s = run_study(&m, stages, &filter)?;
    print_summary(g.format, &s);
    if let Some((step, msg)) = s.failed.first() {
        return Err(StudyError::Step {
            step: step.clone(),
            msg: msg.clone(),
        });
    }
    Ok(())
}

fn direct_finetune(
    g: &Global,
    ckpt: &Path,
    source: &str,
    target: &str,
    strategy: Strategy,
    level: AvailabilityLevel,
) -> Result<()> {
    let m = load_manifest(g)?;
    let out = require_out(g)?;
    std::fs::create_dir_all(out).map_err(|e| StudyError::io(out, e))?;
    let profile: Profile = m.profile();
    let seed = g.seed.unwrap_or(m.seeds[0]);
    let data = DomainData::load(&m.dataset, target)?;
    let (pool, test) = data.split(m.pool_size());
    let base = checkpoint::load(ckpt)?;
    let tuned = finetune(&base, pool, strategy, level, &profile.finetune, run_seed(seed, source, target))?;
    checkpoint::save(&tuned.model, &out.join("model.ckpt"))?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| StudyError::io(&p, e))
    };
    write("history.csv", tuned.history.to_csv())?;
    let prov = Provenance {
        source_domain: source.into(),
        target_domain: target.into(),
        strategy,
        availability: level,
        seed,
        base_checkpoint_hash: hash_file(ckpt)?,
        scans: tuned.selection.scans.clone(),
        slices: tuned.selection.slices.len(),
    };
    write("provenance.json", serde_json::to_string_pretty(&prov).expect("provenance serializes") + "\n")?;
    let recs = score_cases(
        &tuned.model,
        test,
        source,
        target,
        strategy.into(),
        Some(level),
        seed,
        m.tolerance_mm,
        profile.inference_batch,
    )?;
    let store = layershift::RecordStore::new(out.join("scores.jsonl"));
    if store.path().exists() {
        std::fs::remove_file(store.path()).map_err(|e| StudyError::io(store.path(), e))?;
    }
    store.append_all(&recs)?;
    print_rows(g.format, &["case_id", "dice", "surface_dice"], &recs, |r| {
        vec![r.case_id.clone(), format!("{:.6}", r.dice), format!("{:.6}", r.surface_dice)]
    });
    Ok(())
}

#[derive(Serialize)]
struct MetricRow {
    case_id: String,
    dice: f64,
    surface_dice: f64,
    tolerance_mm: f64,
}

fn evaluate(g: &Global, pairs: &Path, tolerance: f64) -> Result<()> {
    let mut rdr = csv::Reader::from_path(pairs).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => StudyError::MissingFile(pairs.to_path_buf()),
        _ => StudyError::format(pairs, e.to_string()),
    })?;
    let base = pairs.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| StudyError::format(pairs, e.to_string()))?;
        let (Some(id), Some(p), Some(r)) = (rec.get(0), rec.get(1), rec.get(2)) else {
            return Err(StudyError::format(pairs, "expected case_id,prediction,reference"));
        };
        let pred = read_mask(&base.join(p))?;
        let refm = read_mask(&base.join(r))?;
        rows.push(MetricRow {
            case_id: id.to_string(),
            dice: dice(&pred, &refm)?.value,
            surface_dice: surface_dice(&pred, &refm, tolerance)?.value,
            tolerance_mm: tolerance,
        });
    }
    let text_rows = |r: &MetricRow| {
        vec![
            r.case_id.clone(),
            format!("{:.6}", r.dice),
            format!("{:.6}", r.surface_dice),
            format!("{}", r.tolerance_mm),
        ]
    };
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out).map_err(|e| StudyError::io(out, e))?;
        let path = out.join("metrics.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| StudyError::format(&path, e.to_string()))?;
        let wrap = |e: csv::Error| StudyError::format(&path, e.to_string());
        w.write_record(["case_id", "dice", "surface_dice", "tolerance_mm"]).map_err(wrap)?;
        for r in &rows {
            w.write_record(text_rows(r)).map_err(wrap)?;
        }
        w.flush().map_err(|e| StudyError::io(&path, e))?;
    }
    print_rows(g.format, &["case_id", "dice", "surface_dice", "tolerance_mm"], &rows, text_rows);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(t) = g.threads {
        if t == 0 {
            return Err(StudyError::invalid("--threads must be >= 1"));
        }
        layershift_core::par::init_threads(t);
    }
    match &cli.command {
        Command::Synth { cases, shape, domains } => {
            let out = require_out(g)?;
            let shape = match shape.as_deref() {
                Some(&[x, y, z]) => [x, y, z],
                Some(s) => return Err(StudyError::invalid(format!("--shape needs 3 sizes, got {}", s.len()))),
                None => DEFAULT_SHAPE,
            };
            let mut doms = default_domains();
            if let Some(keep) = domains {
                if let Some(bad) = keep.iter().find(|k| !doms.iter().any(|d| &&d.name == k)) {
                    return Err(StudyError::invalid(format!("unknown synthetic domain {bad}")));
                }
                doms.retain(|d| keep.contains(&d.name));
            }
            if doms.len() < 2 {
                return Err(StudyError::invalid("a benchmark needs at least 2 domains"));
            }
            let m = build_benchmark(&doms, *cases, Geometry::new(shape, [1.0; 3])?, g.seed.unwrap_or(0), out)?;
            print_rows(g.format, &["id", "domain", "volume_path", "mask_path"], &m.cases, |c| {
                vec![c.id.clone(), c.domain.clone(), c.volume_path.clone(), c.mask_path.clone()]
            });
        }
        Command::Ingest { images, masks, domain } => {
            let out = require_out(g)?;
            let m = ingest_dir(images, masks, out, domain.as_deref())?;
            print_rows(g.format, &["id", "domain", "volume_path", "mask_path"], &m.cases, |c| {
                vec![c.id.clone(), c.domain.clone(), c.volume_path.clone(), c.mask_path.clone()]
            });
        }
        Command::TrainSource { domain } => {
            let filter = RunFilter {
                source: domain.clone(),
                ..Default::default()
            };
            stages(g, &[Stage::Source], filter)?;
        }
        Command::Oracle => stages(g, &[Stage::Oracle], RunFilter::default())?,
        Command::Transfer => stages(g, &[Stage::Transfer], RunFilter::default())?,
        Command::Finetune {
            source,
            target,
            strategy,
            level,
            checkpoint,
        } => match checkpoint {
            Some(c) => direct_finetune(
                g,
                c,
                source.as_deref().unwrap_or_default(),
                target.as_deref().unwrap_or_default(),
                strategy.expect("required with --checkpoint"),
                level.expect("required with --checkpoint"),
            )?,
            None => {
                let filter = RunFilter {
                    source: source.clone(),
                    target: target.clone(),
                    strategy: *strategy,
                    level: *level,
                    seed: g.seed,
                };
                // --seed selects a fine-tuning seed here, not the study seed
                let g2 = Global { seed: None, ..g.clone() };
                stages(&g2, &[Stage::Finetune], filter)?;
            }
        },
        Command::Evaluate { pairs, tolerance } => evaluate(g, pairs, *tolerance)?,
        Command::Report { records } => {
            let recs = read_records(records)?;
            let out = g
                .out
                .clone()
                .unwrap_or_else(|| records.parent().unwrap_or(Path::new(".")).join("report"));
            let report = Report::from_records(&recs)?;
            let files = report.write(&out)?;
            let names: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
            print_rows(g.format, &["file"], &names, |n| vec![n.clone()]);
        }
        Command::Study => stages(g, &Stage::ALL, RunFilter::default())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let msg = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": msg}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
