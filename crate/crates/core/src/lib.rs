#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod debias;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod model;
pub mod noise;
pub mod prompt_gen;
pub mod rng;
pub mod synthetic;
pub mod theory;
