//! Critical site percolation on the triangular lattice: lattice fields, their
//! Monte Carlo correlators, arm events and exact small-patch enumeration.

pub mod analysis;
pub mod error;
pub mod estimators;
pub mod events;
pub mod lattice;
pub mod oracle;
pub mod sampler;
pub mod stats;

pub use analysis::{eval_f, fit_log_correction, fit_power_law, ConstantLedger, FitResult, Similarity};
pub use error::{Error, Result};
pub use estimators::{
    compose_log_partner, AnnulusTerms, Budget, Companion, CompiledRequest, CorrelatorKind, CorrelatorRequest,
    Estimator, LogPartnerConstants, PiSource, SamplingPlan,
};
pub use lattice::{energy_offsets, nearest_vertex, Domain, LatticePoint, PointRole, PointSpec};
pub use oracle::{exact_correlator, exact_event_probability, TinyPatch};
pub use sampler::{label_clusters, sample_config, spin_product_expectation, ClusterLabels, Configuration, StreamKey};
pub use stats::{BatchStats, Estimate, EstimateRecord, Normalization, PiPlugin};
