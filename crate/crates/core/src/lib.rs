//! Energy-ranking regularizer and prototype classifier for multi-domain training.
//!
//! The core idea: a feature extractor is trained so that the *energy* between
//! two samples (an exponential kernel over their feature distance) respects a
//! partial order determined by whether the samples share a category and/or a
//! domain. Same-category/same-domain pairs must sit at lower energy than
//! same-category/cross-domain pairs, which must sit below cross-category
//! pairs. A second term pulls same-category energies together regardless of
//! domain. Classification happens by distance to learned per-class prototypes,
//! so the ranking structure and the decision rule live in the same metric
//! space.
//!
//! The crate is self-contained: deterministic counter-based RNG, a small dense
//! extractor with hand-derived backprop, AdamW, a synthetic multi-domain
//! generator, and a trainer with leave-one-domain-out evaluation. Everything
//! is `f64` and every run is bit-reproducible from a single seed.

pub mod checkpoint;
pub mod energy;
pub mod gradcheck;
pub mod losses;
pub mod net;
pub mod optim;
pub mod pca;
pub mod prototypes;
pub mod rng;
pub mod synth;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type. Variants map onto distinct CLI exit codes, so
/// constructors should pick the variant by *kind of failure*, not by module.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not (vector lengths, batch sizes, ...).
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// A NaN or infinity showed up where finite math was required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A caller-supplied value is outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A batch lacks the label structure the losses need.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A configuration value (file or struct) violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called in an order the API does not allow.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Training produced a non-finite loss or gradient.
    #[error("numeric divergence in {term} at batch {batch}")]
    Divergence { term: String, batch: usize },

    /// A checkpoint was written by an incompatible format version.
    #[error("checkpoint version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    /// A file exists but its contents are not what the format promises.
    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use checkpoint::Checkpoint;
pub use energy::{pair_potential, pairwise_energy_matrix, potential_difference, EnergyConfig, FeatureBatch};
pub use losses::{relation_groups, LossConfig, RelationGroups};
pub use net::{ExtractorConfig, ExtractorState, Forward, Gradients, ModelParams, Nonlinearity};
pub use optim::{lr_schedule, AdamState, OptimizerHyper};
pub use prototypes::{class_probabilities, classification_loss, min_class_distance, predict, prototype_distances, PrototypeBank};
pub use rng::Stream;
pub use synth::{
    generate, leave_one_domain_out, BatchSampler, Dataset, DatasetMeta, DatasetSpec, RhoSpec, Sample, Splits,
};
pub use trainer::{
    batch_from_indices, batch_loss_and_grads, block_features, centroid_probe_accuracy, confidence_interval,
    evaluate, export_embeddings, init_state, objective_probe, rank_violation_audit, read_metrics, train,
    write_embeddings_csv, write_metrics, AuditReport, BatchTerms, BlockCurve, DomainAccuracy, EmbeddingRow,
    EvalReport, MetricsReport, TrainConfig,
};
