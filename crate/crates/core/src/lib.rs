//! Entanglement routing for quantum networks whose switches fuse any number of
//! successful links with one GHZ measurement.
//!
//! * [`netgraph`]: topology model, random generators, document format.
//! * [`rate`]: analytic entanglement rates plus exhaustive and Monte Carlo oracles.
//! * [`router`]: the four-stage routing pipeline.
//! * [`baseline`]: classic-swapping comparison algorithms.
//! * [`harness`]: experiment sweeps and CSV output.

pub mod netgraph;
pub mod rate;
pub mod fixtures;
pub mod router;
pub mod baseline;
pub mod harness;
