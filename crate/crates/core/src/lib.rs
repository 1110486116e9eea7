//! Verified-exploration reinforcement learning.
//!
//! A blended policy `h = (g, φ, f)` runs a neural actor `f` behind a runtime
//! monitor and falls back to a piecewise-affine shield `g` whenever the
//! worst-case successor of the network's action is not provably inside the
//! certified safe set `φ`. Training alternates gradient updates of `f` with a
//! projection that re-synthesises a certified shield imitating it.

pub mod blend;
pub mod envmodel;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod neural;
pub mod project;
pub mod revel;
pub mod shield;
pub mod verifier;

pub use error::{Error, Result};
