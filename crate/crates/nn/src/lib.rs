//! CPU U-Net segmentation models, layer groups and training.

pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{NnError, Result};
pub use loss::LossKind;
pub use model::{stack_slices, GroupName, LayerGroup, ModelSpec, SegmentationModel, Tape, Variant};
pub use optim::NesterovSgd;
pub use params::{Param, ParamId, ParamStore, TensorKind};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{
    augment, augment_pair, lr_schedule, sample_training_batch, train, train_with, Batch, Dihedral, EpochRecord,
    Phase, TrainConfig, TrainHistory, TrainSlice,
};
