//! CompConv: a compact convolution module built from a recursive
//! concatenation of identity-copied, convolved and depthwise channel blocks.
//!
//! The crate provides a loop-based reference executor ([`conv`], [`ops`]),
//! the layout planner ([`planner`]), the executable layer ([`layer`]), an
//! exact parameter/MAC cost model ([`cost`]), architecture descriptions
//! ([`zoo`]), a small reverse-mode autograd with SGD training ([`autograd`],
//! [`train`]) and deterministic toy data ([`data`]).

pub mod autograd;
pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod exec;
pub mod layer;
pub mod network;
pub mod ops;
pub mod planner;
pub mod reference;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod zoo;

pub use conv::{conv2d, ConvSpec, MacCounter};
pub use error::{Error, Result};
pub use layer::{CompConvLayer, CompWeights, ConvModule, InitConfig, InitScheme};
pub use planner::{build_plan, choose_depth, compute_cprim, validate_plan, CompPlan, DepthPolicy};
pub use tensor::{Shape, Tensor};
