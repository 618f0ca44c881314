//! CLI physics clients exercising the particle-mesh framework end to end:
//! Lennard-Jones molecular dynamics, Gray-Scott reaction-diffusion, and a
//! discrete-element avalanche.

pub mod cli;
pub mod config;
pub mod dem;
pub mod gs;
pub mod md;
