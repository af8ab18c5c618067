//! Particle containers, an exact k-nearest-neighbour index and regular grids.
//!
//! Everything downstream (feature graphs, losses, metrics) is built on the
//! three types exported here:
//!
//! * [`ParticleFrame`] / [`FlowField`]: validated `n × 3` point and vector sets.
//! * [`SpatialIndex`]: an immutable k-d tree answering exact k-NN queries with
//!   deterministic tie-breaking (lower particle index wins).
//! * [`Grid`]: a cubic lattice fitted to a frame's bounding box.

mod error;
mod frame;
mod grid;
mod spatial;

pub use error::CoreError;
pub use frame::{FlowField, ParticleFrame, Vec3};
pub use grid::{bounding_grid, Grid, GridPlacement, DEFAULT_MARGIN, MIN_SPACING};
pub use spatial::{brute_force_knn, Neighbor, SpatialIndex};

/// Squared Euclidean distance between two 3-vectors.
#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
