//! Latent space roadmaps for visual action planning on synthetic
//! combinatorial worlds.

pub mod cli;
pub mod cluster;
pub mod encoders;
pub mod io;
pub mod lsr;
pub mod metrics;
pub mod nn;
pub mod synthgen;
pub mod worlds;
