//! Binary convolutional encoder-decoder network (B-CEDNet) for pixel-wise
//! character salience mapping.
//!
//! The crate trains, serializes and executes an 11-block encoder-decoder whose
//! convolutions run on bit-packed feature maps with XNOR-popcount arithmetic.
//! Every packed computation has a real-valued twin so the two can be checked
//! against each other bit for bit.
//!
//! - [`bintensor`]: packed and dense tensors, the XNOR-popcount primitive
//! - [`nnlayers`]: convolution, batch norm, binarization, pooling, softmax
//! - [`netgraph`]: network configuration and the three forward paths
//! - [`refpath`]: slow ±1 double-precision reference forward pass
//! - [`trainer`]: straight-through training with AdaMax
//! - [`textgen`]: synthetic labeled scene-text renderer and dataset container
//! - [`modelio`]: model files, checkpoints and size accounting
//! - [`evalbench`]: pixel accuracy and the timing harness

pub mod bintensor;
pub mod error;
pub mod evalbench;
pub mod fsutil;
pub mod modelio;
pub mod netgraph;
pub mod nnlayers;
pub mod pgm;
pub mod refpath;
pub mod textgen;
pub mod trainer;

pub use bintensor::{BitTensor, PoolIndexMap, RealTensor};
pub use error::{Error, Result};
pub use netgraph::{BlockKind, BlockSpec, ForwardMode, LabelMap, NetConfig, Network, SalienceMap};
pub use nnlayers::{BNParams, BinConvLayer, FoldedThreshold, RealConvLayer};

/// Number of output classes: background plus the letters A to Z.
pub const NUM_CLASSES: usize = 27;
