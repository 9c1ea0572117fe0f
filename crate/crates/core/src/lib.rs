//! Submap joining for large-scale SLAM.
//!
//! Local maps (an estimate plus a sparse information matrix, expressed in a
//! frame defined by one pose or by two/three features) are fused pairwise by a
//! single sparse linear least-squares solve followed by a closed-form change of
//! coordinate frame. Pairwise joins are driven sequentially or by divide and
//! conquer to build a global map.

pub mod cli;
pub mod error;
pub mod eval;
pub mod frame;
pub mod geometry;
pub mod io;
pub mod join;
pub mod localmap;
pub mod oracle;
pub mod sim;
pub mod sparse;
pub mod state;
pub mod strategy;

pub use error::{Error, Result};
pub use geometry::{wrap_angle, Angle, Pose2, Pose3};
pub use join::join_two_maps;
pub use localmap::LocalMap;
pub use sparse::{SparseMatrix, SparseSymMatrix};
pub use state::{Dim, FrameDescriptor, FramedState, HeadingMode, StateKey, StateVector};
