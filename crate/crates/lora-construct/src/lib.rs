//! Closed-form low-rank adapters for frozen linear chains, ReLU networks and
//! attention networks, with a small reverse-mode trainer as the gradient
//! baseline.

pub mod autodiff;
pub mod error;
pub mod fnn;
pub mod linear;
pub mod matrix;
pub mod tfn;
pub mod train;

pub use error::{Error, Result};
pub use matrix::{Matrix, Vector};
