//! Distributed autonomous valet parking simulator: lot world, roadside
//! perception, central coordination, per-vehicle lifecycle nodes, and the
//! harness that runs and checks scenarios.

pub mod cli;
pub mod coordination;
pub mod geometry;
pub mod harness;
pub mod node;
pub mod perception;
pub mod runtime;
pub mod topics;
pub mod world;
