//! Skeletal graph neural networks for lifting 2D keypoints to 3D poses.
//!
//! The crate bundles everything a lifting experiment needs: skeleton
//! topologies and hop partitions, a small reverse-mode autodiff engine,
//! graph layers (GCN, locally connected, hop-aware channel-squeezing fusion),
//! learned dynamic graphs, model assembly, training, metrics, a synthetic
//! pose generator and a CLI.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dynamic;
pub mod error;
pub mod gradsuite;
pub mod hexfloat;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod skeleton;
pub mod train;

pub use autodiff::{ParamSet, Tape, Tensor, Var};
pub use skeleton::{compute_hop_partition, HopPartition, SkeletonTopology};
