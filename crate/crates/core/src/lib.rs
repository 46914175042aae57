//! Multi-view feature-metric 6D object pose refinement.
//!
//! Given per-view object pose candidates from calibrated cameras, this crate
//! aggregates them into a world frame, removes duplicates with 3D NMS, and
//! refines each surviving candidate by jointly aligning rendered 3D-registered
//! feature points against per-view query feature maps with a robustified
//! Levenberg-Marquardt solver. Refined poses are scored by their normalized
//! feature-metric loss across views.
//!
//! The crate ships its own verification harness: [`synth`] generates
//! deterministic multi-view scenes (asymmetric convex meshes, camera rings,
//! procedural surface feature fields) with known ground truth, so every stage
//! can be validated end to end without any learned components.

pub mod eval;
pub mod features;
pub mod geometry;
pub mod io;
pub mod mesh;
pub mod pipeline;
pub mod render;
pub mod robust;
pub mod solver;
pub mod synth;

pub use geometry::{PinholeCamera, RigidTransform, Twist};
