//! Moment relaxations for polynomial optimization with optimality
//! certificates based on the truncated GNS construction.
//!
//! The pipeline is: assemble the moment relaxation of a given degree
//! ([`sdp`]), solve it with a dense interior-point method, build the truncated
//! GNS model of the optimal moment matrix ([`gns`]), test whether its modified
//! moment matrix is generalized Hankel, and if so extract a Gaussian
//! quadrature rule whose nodes are the candidate minimizers ([`extract`]).
//! [`hierarchy`] drives this over increasing relaxation degrees.

pub mod error;
pub mod extract;
pub mod gns;
pub mod hierarchy;
pub mod io;
pub mod linalg;
pub mod moment;
pub mod poly;
pub mod sdp;

pub use error::{Error, Result};
