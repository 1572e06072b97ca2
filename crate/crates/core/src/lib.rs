pub mod approx;
pub mod cluster;
pub mod costmodel;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optim;

pub use error::{Error, Result};
pub use linalg::{seeded_gaussian, top_r_right_singular_vectors, Matrix, SvdConfig};
