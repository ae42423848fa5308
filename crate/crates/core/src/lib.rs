//! Desk-scale training laboratory for label-guided attention distillation
//! on synthetic lane-segmentation scenes.
//!
//! The crate is organized around a small differentiable-tensor engine
//! ([`numcore`]), channel-flattened attention statistics ([`attention`]),
//! a compact stage-tapped segmentation network ([`netlib`]), the
//! distillation objectives and their ablation baselines ([`distill`]),
//! training loops ([`trainer`]), a procedural scene generator and dataset
//! format ([`lanedata`]), and both lane-detection evaluation protocols
//! ([`laneval`]).

pub mod attention;
pub mod distill;
pub mod lanedata;
pub mod laneval;
pub mod netlib;
pub mod numcore;
pub mod trainer;
