pub mod adjoint;
pub mod control;
pub mod error;
pub mod library;
pub mod mollify;
pub mod problem;
pub mod quadrature;
pub mod solver;
pub mod state_box;
pub mod trajectory;

pub use error::{Error, Result};
