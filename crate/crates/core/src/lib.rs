//! Distributed framework for particle and hybrid particle-mesh simulations.
//!
//! The library decomposes an n-dimensional domain across ranks, transparently
//! maps particles and mesh nodes to their owners, maintains ghost layers,
//! re-balances load at runtime, and provides chunked checkpoint/restart plus
//! VTK output. Communication runs over an in-process multi-rank harness or
//! TCP sockets; there is no MPI dependency.

pub mod decomp;
pub mod dlb;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod interp;
pub mod io;
pub mod mesh;
pub mod particles;
pub mod schema;
pub mod transport;

pub use error::{Error, Result};
