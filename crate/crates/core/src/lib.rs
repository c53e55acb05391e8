//! Imaging primitives for layer-selective domain adaptation experiments.
//!
//! * [`volume`]: volumes, masks, axial slices, resampling and crops.
//! * [`io`]: the native raw + JSON sidecar volume format and dataset manifests.
//! * [`metrics`]: volumetric Dice and Surface Dice at a distance tolerance.
//! * [`stats`]: exact paired sign test.
//! * [`synth`]: synthetic head phantoms under controllable intensity shifts.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod error;
pub mod io;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use metrics::{dice, extract_surface, surface_dice, MetricName, MetricResult, SurfacePointSet};
pub use stats::{binomial_upper_tail, paired_sign_test, SignTest, Side, SIGNIFICANCE_LEVEL};
pub use volume::{Geometry, Mask, Slice2D, Volume};
