//! Performance-testing toolkit for LiDAR perception pipelines.
//!
//! The crate is organised around the data flow of a latency study:
//!
//! * [`scene`] holds frames, points and annotated obstacles, plus the scene
//!   directory format.
//! * [`geometry`] provides yaw-aware bird's-eye-view footprints and IoU.
//! * [`mutators`] implements the latency-stressing scene operators.
//! * [`detector`] is a geometric surrogate detector with a detection-count
//!   latency model, GT matching and latency-trace CSV I/O.
//! * [`qpn`] simulates the detection pipeline as a queueing network.
//! * [`availability`] turns latencies into delays and dropped frames.
//! * [`trajectory`] propagates drops and detection deviations into
//!   constant-velocity predictions and ADE/FDE.
//! * [`stats`] compares paired samples (Wilcoxon signed-rank, Cliff's delta).

pub mod availability;
pub mod detector;
pub mod error;
pub mod fixtures;
pub mod format;
pub mod geometry;
pub mod mutators;
pub mod qpn;
pub mod scene;
pub mod seed;
pub mod stats;
pub mod trajectory;

pub use error::{Error, Result};
