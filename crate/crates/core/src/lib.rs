//! Direct convolution for CPU inference.
//!
//! A layer is planned once ([`csa::plan`]): the planner sizes input, filter
//! and output tiles to fit L1, distributes groups of tiles over L2 and L3,
//! and picks an input- or weight-stationary schedule from an analytic cost
//! model. The executor ([`executor::conv_direct`]) then runs the tiled loop
//! nest, packing each input tile right before the micro-kernel consumes it.
//!
//! [`baseline`] holds the naive and Im2Col+GEMM references used to check
//! results and packing traffic, and [`cachesim`] replays the executor's tile
//! trace through an LRU hierarchy to check the cost model.

pub mod baseline;
pub mod cachesim;
pub mod csa;
pub mod error;
pub mod executor;
pub mod layers;
pub mod machine;
pub mod microkernel;
pub mod packing;
pub mod rng;
pub mod shape;
pub mod tensor;

pub use error::{CacheLevel, Error, Result};
pub use machine::MachineSpec;
pub use shape::{output_dims, ConvShape};
pub use tensor::{Matrix, Tensor3, Tensor4};
