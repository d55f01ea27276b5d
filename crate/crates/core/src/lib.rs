//! Egocentric full-body motion capture from a head-mounted stereo fisheye rig.
//!
//! Pose is recovered per frame by minimizing a hybrid energy: a generative
//! color term from a volumetric Gaussian body model ray-cast into both fisheye
//! views, a robust 2D joint-detection term, a joint-limit and rest-pose prior,
//! and a temporal smoothness term. The crate also ships dataset tooling
//! (annotation reprojection, chroma-key compositing, recoloring), evaluation
//! metrics, and a synthetic-scene generator with exact ground truth.

// `!(x > 0.0)` is used throughout to reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod body_model;
pub mod camera;
pub mod datatools;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod io;
pub mod overlay;
pub mod raster;
pub mod skeleton;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
