//! Infinite-order kernel neural operators on structured latent grids.
//!
//! Module map:
//!
//! * [`linalg`]: dense symmetric linear algebra and tensor mode products.
//! * [`kernels`]: base kernels, Gram assembly and grid geometry.
//! * [`resolvent`]: vanilla, tensor-product and truncated propagators.
//! * [`mlp`]: small dense MLPs with a reverse sweep.
//! * [`model`]: the encoder-processor-decoder network and its parameters.
//! * [`rng`]: the seeded splitmix64 generator.
//! * [`store`]: the manifest + raw-blob on-disk format.
//! * [`train`]: losses, normalization, AdamW, metrics and rollout.
//! * [`data`]: deterministic synthetic datasets.

pub mod data;
pub mod kernels;
pub mod linalg;
pub mod mlp;
pub mod model;
pub mod resolvent;
pub mod rng;
pub mod store;
pub mod train;

pub use kernels::{AxisKernelParams, LatentGrid, LinearWindowKernel, PointCloud, PointSet};
pub use linalg::{DenseMatrix, LatentTensor, SymEig};
pub use resolvent::{GridOperator, Variant};
