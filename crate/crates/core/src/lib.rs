//! Conceptual belief spaces for language models.
//!
//! The crate turns per-sentence belief ratings and residual-stream activations
//! into belief trajectories, linear probes, low-dimensional belief manifolds,
//! inter-concept geometry and steering analyses. A synthetic generator with a
//! planted two-dimensional latent space provides ground truth for every stage.
//!
//! Module map:
//!
//! - [`data`]: dataset model and the on-disk format (manifest, JSON-lines, raw `f32` tensors).
//! - [`elicitation`]: rating distributions to scalar beliefs and trajectories.
//! - [`probes`]: ridge probes, isotonic calibration, layer sweeps.
//! - [`manifold`]: max-activating selection, PCA reducer, projection.
//! - [`geometry`]: centroids, distance matrices, Ward clustering, Mantel correlation, Procrustes.
//! - [`steering`]: steering vectors, interventions, entanglement analysis.
//! - [`oracle`]: the planted-geometry generator and its analytic readout.

pub mod data;
pub mod elicitation;
pub mod geometry;
pub mod manifold;
pub mod oracle;
pub mod probes;
pub mod stats;
pub mod steering;

pub use data::{
    load_dataset, write_dataset, ActivationDataset, BeliefTrajectory, ConceptDomain, Dataset,
    DatasetManifest, RecordKey, StoryRecord,
};
