//! Core building blocks for video-based 6D object pose estimation.

pub mod geometry;
pub mod objects;
pub mod losses;
pub mod metrics;
pub mod data;
