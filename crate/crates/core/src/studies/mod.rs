//! Measurement protocols over a model pair: cross-model intervention, input
//! perturbation, Pass@K, and the replay ablation grid.

pub mod ablation;
pub mod intervention;
pub mod passk;
pub mod perturbation;
pub mod stats;

pub use ablation::{ablation_grid, AblationCell, AblationReport};
pub use intervention::{intervene_decode, intervention_positions, splice_decode, Donor, InterventionSpec, SpliceMode};
pub use passk::{pass_at_k, ModelSampler, PassKReport, Sampler};
pub use perturbation::{perturbation_sweep, PerturbationRecord, ProbeResponse};
pub use stats::spearman;
