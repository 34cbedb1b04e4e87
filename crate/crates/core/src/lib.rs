//! Guaranteed-SPD hierarchically semiseparable (HSS) approximations of kernel
//! matrices, built either directly from dense blocks or from an H2
//! representation, and used as preconditioners for conjugate gradients.

pub mod codec;
pub mod error;
pub mod geometry;
pub mod kernels;
pub mod h2;
pub mod linalg;
pub mod spdhss;
pub mod solvers;
pub mod ulv;

pub use error::{Error, Result};
pub use geometry::{PartitionTree, PointSet};
pub use kernels::{KernelFamily, KernelSpec};
pub use spdhss::SpdHss;
