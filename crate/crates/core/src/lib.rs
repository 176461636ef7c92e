//! Jointly learned pose/depth optimisation and generalizable neural
//! rendering on synthetic scenes.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod imageio;
pub mod losses;
pub mod nn;
pub mod optimizer;
pub mod renderer;
pub mod scene_graph;
pub mod synth;

pub use error::{Error, Result};
