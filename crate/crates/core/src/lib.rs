//! Semantic bird's-eye-view (S-BEV) vehicle re-localization.
//!
//! The crate covers the whole chain: depth from stereo, S-BEV rasterization
//! with motion-compensated accumulation, topo-metric maps, a small dense
//! network engine, embedding-based coarse localization with 3-DoF fine
//! regression, Kalman fusion with odometry, a deterministic synthetic world
//! for experiments, file formats, and evaluation.

pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod localizer;
pub mod nnet;
pub mod rng;
pub mod sbev;
pub mod stereo;
pub mod synthworld;
pub mod topomap;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, Pose2, Pose3};
pub use sbev::{GridSpec, SBev};
