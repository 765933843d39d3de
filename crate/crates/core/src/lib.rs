//! Training N:M fine-grained structured sparse networks from scratch.
//!
//! * [`tensor`]: dense row-major matrices and deterministic kernels
//! * [`nm`]: magnitude projection to an N:M pattern, masks, packed storage and `spmm`
//! * [`model`]: MLP whose patterned layers compute with projected weights
//! * [`optim`]: dense SGD, STE, SR-STE and the two alternative refinement rules
//! * [`sad`]: Sparse Architecture Divergence between mask snapshots
//! * [`data`]: MNIST IDX loading and synthetic datasets
//! * [`train`]: the training loop and metrics

pub mod data;
pub mod error;
pub mod model;
pub mod nm;
pub mod optim;
pub mod rng;
pub mod sad;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ForwardMode, GradientSet, LayerState, MlpModel};
pub use nm::{compress, decompress, mask_of, project, spmm, sparsity_ratio, Mask, NMCompressed, SparsityPattern};
pub use optim::{LrSchedule, OptimState, SgdConfig, Variant};
pub use sad::{sad, MaskSnapshot, SadRecord};
pub use tensor::{DenseMatrix, Real};
pub use train::{train, TrainConfig, TrainReport};
