#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Interaction transformer: generates the reaction motion of one skeleton
//! from the action motion of another.

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod model;
pub mod numerics;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
