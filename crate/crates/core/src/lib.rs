//! Training and inference engine for Mob-INC, a maize leaf disease classifier
//! that grafts two Inception modules and a fully connected head onto a
//! truncated MobileNetV2 trunk.
//!
//! Everything is implemented on the CPU in plain Rust: NHWC tensors and
//! im2col/GEMM convolution ([`tensor`]), layer kernels with hand-written
//! backward passes ([`ops`]), a layer graph with freeze policies for transfer
//! learning ([`graph`]), the architecture builders and checkpoint format
//! ([`arch`], [`checkpoint`]), the dataset pipeline ([`data`]) and the
//! training loop and evaluation indicators ([`train`]).

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{FreezePolicy, Graph, Op};
pub use ops::Mode;
pub use tensor::{Padding, Shape4, Tensor};
