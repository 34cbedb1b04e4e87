//! Point sets, the spatial partition tree and H2 admissibility.

mod points;
mod tree;

pub use points::{ball_radius, generate_ball_points, generate_sphere_points, sphere_radius, PointSet};
pub use tree::{BBox, BlockType, Node, PartitionTree, ADJACENCY_RTOL};
