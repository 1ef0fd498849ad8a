pub mod bridge;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod ensemble;
pub mod error;
mod linalg;
pub mod oracle;
pub mod points;
pub mod potential;
pub mod problem;
pub mod rng;
pub mod score;
