//! Certified inner approximations of regions of attraction for polynomial
//! vector fields.

pub mod bench;
pub mod cli;
pub mod level;
pub mod oracle;
pub mod poly;
pub mod rcomp;
pub mod rcomssf;
pub mod sdp;
mod serde_matrix;
pub mod sos;
pub mod vsiter;
