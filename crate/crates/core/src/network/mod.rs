//! Shallow CNN engine: tensors, layers, training, augmentation,
//! checkpoints and a finite-difference gradient checker.

mod augment;
mod checkpoint;
mod gradcheck;
mod model;
mod spec;
mod tensor;
mod train;

pub use augment::{augment, AugmentParams, AugmentPolicy};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use model::{Mode, Network};
pub use spec::{ArchDims, InputShape, LayerSpec, ModelFamily, NetworkSpec, NUM_CLASSES};
pub use tensor::{Scalar, Tensor};
pub use train::{train, write_loss_log, EpochLog, Optimizer, TrainConfig};

pub(crate) use model::argmax_label;
