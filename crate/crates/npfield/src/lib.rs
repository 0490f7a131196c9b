//! Local motion planning with a learned obstacle-repulsive potential.
//!
//! The pipeline: an occupancy map is turned into a signed-distance field and a
//! repulsive potential grid ([`field`]), footprint-aware potential targets are
//! sampled into a training set, a small neural model learns the potential as a
//! differentiable function of pose ([`npnet`]), a Theta* global planner produces
//! a polyline reference ([`planner`]), and a receding-horizon optimizer uses the
//! learned potential's gradients as the collision cost term ([`mpc`]). The
//! [`bench`] module scores the results and [`render`] draws them.

pub mod bench;
pub mod cli;
pub mod field;
pub mod gridmap;
pub mod mpc;
pub mod npnet;
pub mod planner;
pub mod render;

pub use gridmap::{Footprint, OccupancyGrid, Pose};
