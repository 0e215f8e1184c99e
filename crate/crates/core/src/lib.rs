//! Self-contained visual speech encoder built from scratch: a dense tensor
//! type with reverse-mode automatic differentiation, the convolutional 3D
//! stem, the three-stage shifted-window attention hierarchy, the BN-free
//! convolutional attention temporal module, analytical parameter/MAC
//! accounting, and the harness logic behind the benchmark CLI.
//!
//! Everything is generic over the scalar type ([`Scalar`]): forward and
//! benchmark paths run in `f32`, gradient checking runs in `f64`. Concrete
//! aliases are exported at the crate root.

pub mod cost;
pub mod error;
pub mod harness;
pub mod model;
pub mod resnet;
pub mod rng;
pub mod scalar;
pub mod stem;
pub mod swin;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use scalar::{Dtype, Scalar};
pub use tensor::tape::{Gradients, Tape, TapeRef};
pub use tensor::Tensor;

/// Single-precision tensor used by forward and benchmark paths.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used by gradient-check paths.
pub type Tensor64 = Tensor<f64>;
/// Tape recording `f32` operations.
pub type Tape32 = Tape<f32>;
/// Tape recording `f64` operations.
pub type Tape64 = Tape<f64>;
