//! Configuration-driven driver for the scattering-pole solver.

pub mod app;
pub mod config;
pub mod output;
pub mod run;

pub use config::{Geometry, Layers, RunConfig};
pub use run::{converge, oracle, solve, ConvergeOutput, OracleOutput, SolveOutput, StageError};
