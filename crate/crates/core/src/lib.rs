#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
