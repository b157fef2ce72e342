//! Concept planning for visual storytelling.
//!
//! The pipeline builds a commonsense candidate graph per image sequence,
//! selects story concepts with either a sequential copy selector ([`ssm`]) or
//! a correlation-map maximal-clique selector ([`mcsm`]), and turns the plan
//! into sentences with a small GRU realizer ([`realizer`]).

pub mod artifact;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod mcsm;
pub mod neural;
pub mod pipeline;
pub mod planner;
pub mod realizer;
pub mod selftest;
pub mod ssm;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
