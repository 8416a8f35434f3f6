//! Progressive differentiable architecture search.
//!
//! A differentiable super-network over a cell-based search space is trained
//! in stages. Each stage stacks more cells than the last while keeping fewer
//! candidate operations per edge, skip-connections are regularized with a
//! decaying operation-level dropout, and the final discrete cell is refined
//! to a bounded number of skip-connections.
//!
//! Everything runs on the small reverse-mode engine in [`tensor`].

pub mod data;
pub mod error;
pub mod eval;
pub mod genotype;
pub mod cell;
pub mod config;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
