//! Polyhedral mesh refinement with classical, clustering and learned cutting strategies.

pub mod clustering;
pub mod dataset;
pub mod cnn;
pub mod geometry;
pub mod grid_gen;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod voxel;
