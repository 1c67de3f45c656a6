//! Training orthonormal deep linear networks with Riemannian gradient
//! descent on the Stiefel manifold, plus tooling that measures the
//! gauge-invariant distance to a teacher network and certifies the distance
//! sandwich, the regularity inequality and the linear contraction rate on
//! sampled instances.

pub mod error;
pub mod harness;
pub mod losses;
pub mod matcore;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod stiefel;

pub use error::{Error, Result};
pub use matcore::Matrix;
