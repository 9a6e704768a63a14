//! Optimization kernels: dense SDP, equality-constrained least squares, and
//! smooth local descent.

pub mod affine;
pub mod lsq;
pub mod sdp;
pub mod smooth;

pub use affine::{Affine, BlockShape, MatVar, VarSpace};
pub use lsq::{solve_eq_least_squares, LsqProblem, LsqSolution};
pub use sdp::{solve_sdp, SdpProblem, SdpSettings, SdpSolution, SdpStatus};
pub use smooth::{minimize_smooth, SmoothResult, SmoothSettings};
