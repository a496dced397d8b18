//! Parameter-free shape optimization in the plane.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundary_ops;
pub mod cli;
pub mod fem;
pub mod geometry;
pub mod mesh;
pub mod optimizer;
pub mod par;
pub mod problem;
pub mod remesh;
pub mod updates;
pub mod verify;
