//! Numerical laboratory for matrix-weighted weak-type estimates on dyadic
//! meshes: reducing matrices, matrix weight constants, sparse domination,
//! Calderón–Zygmund decompositions and Orlicz norms.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod error;
pub mod mesh;
pub mod ops;
pub mod orlicz;
pub mod smallmat;
pub mod sparsekit;
pub mod weightlab;

pub use error::{Error, Result};
