//! Dense matrices, deterministic random streams and the decompositions the
//! rest of the crate needs. Everything here is a pure function of its inputs.

mod decomp;
mod matrix;
mod rng;

pub use decomp::{left_singular_vectors, qr_thin, solve_spd};
pub use matrix::Matrix;
pub use rng::{gauss, RngStream};
