//! Slice sampling, augmentation and the optimization loop.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use layershift_core::rng::seeded;
use layershift_core::volume::Slice2D;

use crate::error::{NnError, Result};
use crate::loss::{loss_and_grad, LossKind};
use crate::model::SegmentationModel;
use crate::optim::NesterovSgd;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Source,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_reduced: f64,
    /// First epoch trained with `lr_reduced`.
    pub lr_drop_epoch: usize,
    pub momentum: f64,
    pub crop_size: (usize, usize),
    pub augment: bool,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossKind,
}

impl TrainConfig {
    /// 100 epochs of 100 iterations, lr 1e-2 dropping to 1e-3 at epoch 80.
    pub fn paper_source() -> Self {
        TrainConfig {
            phase: Phase::Source,
            epochs: 100,
            iterations_per_epoch: 100,
            batch_size: 32,
            lr_initial: 1e-2,
            lr_reduced: 1e-3,
            lr_drop_epoch: 80,
            momentum: 0.9,
            crop_size: (256, 256),
            augment: true,
            seed: 0,
            loss: LossKind::Bce,
        }
    }

    /// 20 epochs of 100 iterations, lr 1e-3 dropping to 1e-4 at epoch 15.
    pub fn paper_finetune() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            epochs: 20,
            lr_initial: 1e-3,
            lr_reduced: 1e-4,
            lr_drop_epoch: 15,
            ..Self::paper_source()
        }
    }

    /// Scaled-down source schedule for CPU runs; the drop stays at 80%.
    pub fn desk_source() -> Self {
        TrainConfig {
            epochs: 20,
            iterations_per_epoch: 10,
            batch_size: 8,
            lr_drop_epoch: 16,
            crop_size: (48, 48),
            ..Self::paper_source()
        }
    }

    /// Scaled-down fine-tuning schedule: the paper's epochs with a tenth of
    /// the iterations at ten times the rate, so the summed step size matches.
    pub fn desk_finetune() -> Self {
        TrainConfig {
            epochs: 20,
            iterations_per_epoch: 10,
            batch_size: 8,
            lr_initial: 1e-2,
            lr_reduced: 1e-3,
            lr_drop_epoch: 15,
            crop_size: (48, 48),
            ..Self::paper_finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::invalid(m));
        if self.epochs == 0 {
            return bad("epochs must be > 0".into());
        }
        if self.iterations_per_epoch == 0 || self.batch_size == 0 {
            return bad("iterations_per_epoch and batch_size must be > 0".into());
        }
        if self.lr_drop_epoch > self.epochs {
            return bad(format!("lr_drop_epoch {} exceeds epochs {}", self.lr_drop_epoch, self.epochs));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        for lr in [self.lr_initial, self.lr_reduced] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("learning rates must be > 0, got {lr}"));
            }
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return bad("crop size must be >= 1".into());
        }
        Ok(())
    }
}

pub fn lr_schedule(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(NnError::EpochOutOfRange {
            epoch,
            epochs: config.epochs,
        });
    }
    Ok(if epoch < config.lr_drop_epoch {
        config.lr_initial
    } else {
        config.lr_reduced
    })
}

/// An image slice and its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSlice {
    pub image: Slice2D,
    pub mask: Slice2D,
}

impl TrainSlice {
    pub fn new(image: Slice2D, mask: Slice2D) -> Result<Self> {
        if (image.rows, image.cols) != (mask.rows, mask.cols) {
            return Err(NnError::Shape(format!(
                "image {}x{} vs mask {}x{}",
                image.rows, image.cols, mask.rows, mask.cols
            )));
        }
        Ok(TrainSlice { image, mask })
    }
}

/// Element of the dihedral group of the square: `rotation` quarter turns
/// counter-clockwise, then an optional left-right flip. Index `r + 4 * f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral(pub u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);
    pub const FLIP: Dihedral = Dihedral(4);

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Dihedral(rng.random_range(0..8))
    }

    pub fn apply(self, s: &Slice2D) -> Slice2D {
        let mut out = s.clone();
        for _ in 0..self.0 % 4 {
            out = rotate_ccw(&out);
        }
        if self.0 >= 4 {
            out = flip_lr(&out);
        }
        out
    }
}

fn rotate_ccw(s: &Slice2D) -> Slice2D {
    let (h, w) = (s.cols, s.rows);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            data.push(s.get(c, s.cols - 1 - r));
        }
    }
    Slice2D {
        rows: h,
        cols: w,
        data,
        pixel_spacing: [s.pixel_spacing[1], s.pixel_spacing[0]],
        source_index: s.source_index,
    }
}

fn flip_lr(s: &Slice2D) -> Slice2D {
    let mut out = s.clone();
    for r in 0..s.rows {
        out.data[r * s.cols..(r + 1) * s.cols].reverse();
    }
    out
}

/// Applies a uniformly drawn dihedral element.
pub fn augment<R: Rng + ?Sized>(s: &Slice2D, rng: &mut R) -> Slice2D {
    Dihedral::random(rng).apply(s)
}

/// Applies one uniformly drawn element to both image and mask.
pub fn augment_pair<R: Rng + ?Sized>(p: &TrainSlice, rng: &mut R) -> (TrainSlice, Dihedral) {
    let e = Dihedral::random(rng);
    (
        TrainSlice {
            image: e.apply(&p.image),
            mask: e.apply(&p.mask),
        },
        e,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub masks: Tensor<T>,
    /// Pool index of every sample.
    pub sources: Vec<usize>,
    pub transforms: Vec<Dihedral>,
}

/// Draws `batch_size` slices uniformly with replacement, crops each at a
/// random position and augments it when enabled.
pub fn sample_training_batch<T: Scalar, R: Rng + ?Sized>(
    pool: &[TrainSlice],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Batch<T>> {
    if pool.is_empty() {
        return Err(NnError::invalid("training pool is empty"));
    }
    let (h, w) = config.crop_size;
    let n = config.batch_size;
    let mut images = Vec::with_capacity(n * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    let mut sources = Vec::with_capacity(n);
    let mut transforms = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.random_range(0..pool.len());
        let p = &pool[i];
        let window = p.image.random_window(config.crop_size, rng)?;
        let mut crop = TrainSlice {
            image: p.image.crop(&window),
            mask: p.mask.crop(&window),
        };
        let mut e = Dihedral::IDENTITY;
        if config.augment {
            (crop, e) = augment_pair(&crop, rng);
        }
        if (crop.image.rows, crop.image.cols) != (h, w) {
            return Err(NnError::Shape(format!(
                "augmented crop {}x{} differs from {h}x{w}; rotations need square crops",
                crop.image.rows, crop.image.cols
            )));
        }
        images.extend(crop.image.data.iter().map(|&v| T::from_f64(v as f64)));
        masks.extend(crop.mask.data.iter().map(|&v| T::from_f64(v as f64)));
        sources.push(i);
        transforms.push(e);
    }
    Ok(Batch {
        images: Tensor::from_vec(n, 1, h, w, images)?,
        masks: Tensor::from_vec(n, 1, h, w, masks)?,
        sources,
        transforms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,lr,mean_loss` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,mean_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.lr, e.mean_loss));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Runs `epochs x iterations_per_epoch` steps, updating only trainable
/// tensors. The batch stream depends only on `config.seed`.
pub fn train<T: Scalar>(
    model: &mut SegmentationModel<T>,
    pool: &[TrainSlice],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    train_with(model, pool, config, |_| {})
}

/// Like [`train`], calling `on_epoch` after every completed epoch.
pub fn train_with<T: Scalar>(
    model: &mut SegmentationModel<T>,
    pool: &[TrainSlice],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    config.validate()?;
    if pool.is_empty() {
        return Err(NnError::invalid("training pool is empty"));
    }
    let m = model.spec().size_multiple();
    if config.crop_size.0 % m != 0 || config.crop_size.1 % m != 0 {
        return Err(NnError::Shape(format!(
            "crop size {:?} must be divisible by {m}",
            config.crop_size
        )));
    }
    let mut rng = seeded(config.seed);
    let mut opt = NesterovSgd::new(config.momentum)?;
    let mut history = TrainHistory::default();
    let any_trainable = model.trainable_parameter_count() > 0;
    for epoch in 0..config.epochs {
        let lr = lr_schedule(config, epoch)?;
        let start = Instant::now();
        let mut total = 0.0;
        for iteration in 0..config.iterations_per_epoch {
            let batch: Batch<T> = sample_training_batch(pool, config, &mut rng)?;
            let (logits, tape) = model.forward_train(&batch.images)?;
            let (loss, dlogits) = loss_and_grad(config.loss, &logits, &batch.masks)?;
            if !loss.is_finite() {
                return Err(NnError::Divergence {
                    epoch,
                    iteration,
                    detail: format!("loss is {loss}"),
                });
            }
            total += loss;
            if !any_trainable {
                continue;
            }
            model.zero_grads();
            model.backward(tape, dlogits)?;
            opt.step(model.params_mut(), lr).map_err(|e| NnError::Divergence {
                epoch,
                iteration,
                detail: e.to_string(),
            })?;
        }
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: total / config.iterations_per_epoch as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}
