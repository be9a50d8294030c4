//! Online moving-object segmentation for rotating LiDAR scans.
//!
//! Scans are projected to range images, compared with ego-motion compensated
//! past scans through residual images, and segmented into moving and static
//! points either heuristically or with a small learned per-pixel head.

pub mod dump;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heuristic;
pub mod io;
pub mod label;
pub mod learned;
pub mod map;
pub mod pipeline;
pub mod projection;
pub mod residual;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{Point, Pose, Scan};
pub use label::{LabelGrid, MovingLabel};
pub use projection::{ProjectionConfig, RangeImage};
