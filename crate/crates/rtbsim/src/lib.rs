//! Simulation of real-time Byzantine reliable broadcast over lossy links,
//! with consensus and atomic broadcast layered on top.

pub mod codec;
pub mod crypto;
pub mod harness;
pub mod model;
pub mod node;
pub mod poc;
pub mod rtbab;
pub mod rtbc;
pub mod rtbrb;
pub mod simnet;
pub mod wire;
