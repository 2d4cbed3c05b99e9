//! Unsupervised graph-neural dispatch proxy for AC optimal power flow.
//!
//! The crate covers the full pipeline: parsing MATPOWER case files,
//! sampling load scenarios, building a graph-shift operator from the
//! branch admittances, training a GNN that maps nodal demand to a
//! dispatch (generator injections, voltage magnitudes, angles) by
//! descending a penalized generation-cost objective, and checking the
//! resulting operating points against the network's physical limits.
//! A per-instance penalized-descent solver provides the reference
//! dispatch that trained models are scored against.

pub mod autodiff;
pub mod case;
pub mod config;
pub mod dataset;
pub mod gnn;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod solve;
pub mod train;
pub mod matrix;
