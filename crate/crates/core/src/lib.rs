//! Multi-proposal aggregation for 3D instance segmentation of point clouds.
//!
//! Points vote for object centers, sampled votes become proposals with
//! learned features, a graph network over nearby proposals refines them, and
//! proposals are clustered on learned aggregation features to form objects.

pub mod ablation;
pub mod backbone;
mod error;
pub mod eval;
pub mod gcn;
pub mod geom;
pub mod grid;
pub mod model;
pub mod objgen;
pub mod ply;
pub mod proposals;
pub mod scene;
pub mod trainer;

pub use diffcore::ParamStore;
pub use error::{MpaError, Result};
