// Checks such as `!(x > 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convex;
pub mod datamat;
pub mod invopt;
pub mod io;
pub mod error;
pub mod linalg;
pub mod lqr;
pub mod poleplace;
pub mod stability;
pub mod system;
pub mod trajref;

pub use error::{Error, Result};
pub use linalg::Mat;
