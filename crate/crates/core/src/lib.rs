//! Desk-scale two-stage detection lab with decoupled detection heads.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod nn;
pub mod objectives;
pub mod plots;

pub use error::{Error, Result};
