//! Loosely-coupled visual-inertial Gaussian-splatting SLAM.
//!
//! IMU preintegration seeds Generalized-ICP tracking of RGB-D point clouds;
//! tracked keyframes grow and refine a 3D Gaussian map.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gicp;
pub mod imu;
pub mod kdtree;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod se3;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
