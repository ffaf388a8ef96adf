//! Skeleton data formats, checkpoints, training loops and the command-line
//! front end around [`tsegcn_core`].

pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod ntu;
pub mod skeleton;
pub mod trainer;

pub use error::{Error, Result};
pub use tsegcn_core as core;

use tsegcn_core::optim::OptimConfig;
use tsegcn_core::{ModelConfig, SkeletonGraph};

/// Named model presets: `default` (25-joint skeleton, 120 classes) and
/// `toy` (9-joint skeleton, 4 classes).
pub fn preset(name: &str) -> Option<(ModelConfig, SkeletonGraph, OptimConfig)> {
    match name {
        "default" => Some((ModelConfig::default(), skeleton::kinect_v2(), OptimConfig::default())),
        "toy" => Some((ModelConfig::toy(), skeleton::toy9(), OptimConfig::toy())),
        _ => None,
    }
}
