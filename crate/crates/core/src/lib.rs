//! Localization and navigation stack that fuses single-LED visible light
//! positioning, LiDAR Monte Carlo localization and wheel odometry in a
//! loosely coupled EKF, running on a deterministic 2D simulator.

pub mod distance;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod map_io;
pub mod mapping;
pub mod mcl;
pub mod nav;
pub mod sim;
pub mod vlp;

pub use error::{Error, Result};
pub use geometry::Pose2D;
