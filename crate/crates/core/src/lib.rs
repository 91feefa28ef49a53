//! Kernels, blocks, assembly, complexity analysis and training for ESNet,
//! an encoder-decoder segmentation network built from factorized
//! convolution units (FCU) and parallel factorized convolution units (PFCU).

pub mod analysis;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod params;
pub mod tensor;
pub mod training;

pub use blocks::{Block, BlockKind, BlockSpec};
pub use error::{Error, Result};
pub use network::{build_erfnet_reference, build_esnet, build_esnet_scaled, Network, NetworkSpec};
pub use params::ParamStore;
pub use tensor::{LabelMap, Mode, Scalar, Shape4, Tensor4};
