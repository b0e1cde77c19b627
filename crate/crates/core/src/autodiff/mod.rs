//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation of one forward pass together with the
//! context its backward rule needs. [`Graph::backward`] then sweeps the record
//! once in reverse, accumulating gradients additively into every node that was
//! used more than once.

mod array;
mod conv;
pub mod gradcheck;
mod graph;
mod norm;
mod ops;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_params, GradReport};
pub use graph::{Graph, StatUpdate, Var};
pub use norm::{BatchMoments, NormStats};
pub use ops::{softmax, softmax_into};
