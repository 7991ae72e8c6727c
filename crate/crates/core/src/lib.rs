//! Desk-scale lidar-camera fusion pipeline for 3D object detection:
//! point-level decoration via calibration matrices, dual-stream sparse 3D
//! convolution, heatmap-initialized object queries and cross-attention
//! feature fusion, with every numeric kernel paired with an independent
//! oracle or gradient check.

pub mod config;
pub mod decoration;
pub mod detect_loss;
pub mod eval_metrics;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod query_fusion;
pub mod sparse_conv;
pub mod voxel;
