//! Supervised domain adaptation study for 2D U-Net segmentation.
//!
//! A study trains one model per source domain, estimates same-domain quality
//! by cross-validation (the oracle), scores every source model on every other
//! domain (the baseline) and fine-tunes the source models on scarce target
//! data with one of three freezing strategies. Each fine-tuning run is scored
//! by the share of the oracle-baseline gap it closes.

pub mod adaptation;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod ledger;
pub mod manifest;
pub mod records;
pub mod report;
pub mod study;

pub use adaptation::{apply_strategy, finetune, subsample_slices, AvailabilityLevel, Provenance, Strategy};
pub use error::{Result, StudyError};
pub use evaluation::{
    aggregate_trend, build_transfer_matrix, fold_split, gap_closure, winner_counts, GapClosure, Method, ScoreRecord,
    TransferMatrix, GAP_EPSILON,
};
pub use manifest::{ExperimentManifest, Profile, ProfileName};
pub use records::RecordStore;
pub use report::Report;
pub use study::{run_study, RunFilter, Stage, StudySummary};
