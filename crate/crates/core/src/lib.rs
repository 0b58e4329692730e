//! Pyramid non-local blocks for spatiotemporal features.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod costmodel;
pub mod error;
pub mod fcomb;
pub mod gradcheck;
pub mod nonlocal;
pub mod pnl;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{PnlError, Result};
pub use fcomb::{CombMode, FcombParams};
pub use nonlocal::{NonLocalParams, PairwiseKind};
pub use pnl::{PnlConfig, PnlModule, PoolMode};
pub use tensor::{DType, GradTape, Matrix, Shape5, VideoFeature};
