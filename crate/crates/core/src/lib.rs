//! Simulator and analyzer for a polarization-encoded decoy-state BB84 link
//! with qubit-based clock synchronization, gradient-descent polarization
//! compensation and one-decoy finite-key key-rate estimation.

pub mod feedback;
pub mod finite_key;
pub mod link;
pub mod optics;
pub mod sync;
pub mod harness;
