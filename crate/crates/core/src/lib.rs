//! Structure-controlled point cloud generation.
//!
//! Shapes are point clouds segmented into a fixed number of parts. A shape's
//! StructureGraph records which parts exist and which pairs touch. The
//! generator encodes a shape into per-part latents with a graph-attention
//! encoder, regularizes each latent with a conditional continuous normalizing
//! flow, and decodes point clouds with a cross-attention diffusion
//! transformer conditioned on the latents and the graph.

pub mod dataset;
pub mod diff;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod ply;
pub mod predictor;
pub mod sgn;
pub mod shape;
pub mod structure;
pub mod synth;

pub use error::{Error, GraphViolation, Result};
pub use shape::{normalize_cloud, PointCloud};
pub use structure::StructureGraph;
