// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod belief;
pub mod commands;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod learner;
pub mod model;
pub mod nn;
pub mod planner;
pub mod runner;
pub mod simulator;

pub use error::{Error, Result};
